//! Semiconjugacies Φ_n for the basilica capture, level by level.

use semiconj::pullback::{run_pullback, ContinuationOptions};
use semiconj::semiconj::{semiconjugacy_residual, sphere_cover, FieldOptions, FieldStack, MeshOptions, Tower};
use semiconj::surgery::{instances, pullback_curves, LiftOptions};
use std::time::Instant;

fn main() {
    let density: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0.04);
    let levels = 6;
    let s = instances::basilica_capture(0.1).validate().unwrap();
    let run = run_pullback(&s, 60, 1e-9, None, &ContinuationOptions::default()).unwrap();
    let curves = pullback_curves(&s.spec.q, &s.spec.paths(), levels, LiftOptions::default()).unwrap();
    let mesh = MeshOptions::for_surgery(&s).unwrap();
    let tower = Tower::new(&s.spec.q, &run.maps(), &mesh.seeds);
    println!("anchors {}", tower.anchors.len());
    let t = Instant::now();
    let opts = FieldOptions { regions: sphere_cover(), density, mesh, refine: true };
    let stack = FieldStack::build(tower, &curves, levels, &opts).unwrap();
    println!("built in {:.2}s, refined levels {:?}", t.elapsed().as_secs_f64(), stack.refined);
    for n in 0..=levels {
        let f = &stack.fields[n];
        let Ok(r) = semiconjugacy_residual(&stack, n) else { println!("n={n} samples={} unassigned={} no residual", stack.meshes[n].len(), f.unassigned); continue };
        println!(
            "n={n} samples={} unassigned={} max_margin={:.3} defect={:.2e} consistent={} exact={:.2e} limit={:.2e}",
            stack.meshes[n].len(),
            f.unassigned,
            f.max_margin,
            f.max_defect,
            f.consistent(),
            r.exact_step,
            r.limit
        );
    }
}
