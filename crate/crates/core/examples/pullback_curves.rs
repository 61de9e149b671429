//! Generations of pulled-back push paths for the basilica capture, written
//! as JSON when an output path is given.

use semiconj::surgery::{instances, pullback_curves, LiftOptions};

fn main() {
    let s = instances::basilica_capture(0.1).validate().unwrap();
    let curves = pullback_curves(&s.spec.q, &s.spec.paths(), 5, LiftOptions::default()).unwrap();
    for (k, g) in curves.generations.iter().enumerate() {
        let samples: usize = g.iter().map(|c| c.samples.len()).sum();
        let gap = g.iter().map(|c| c.max_gap()).fold(0.0, f64::max);
        println!("generation {k}: {} curves, {samples} samples, max gap {gap:.3e}", g.len());
    }
    println!("forward residual {:.2e}", curves.forward_residual(&s.spec.q));
    if let Some(out) = std::env::args().nth(1) {
        std::fs::write(&out, serde_json::to_string(&curves).unwrap()).unwrap();
        println!("wrote {out}");
    }
}
