//! Thurston pullback for the capture of ∞ into the basilica: convergence
//! table and the limit map.

use semiconj::pullback::{run_pullback, ContinuationOptions};
use semiconj::surgery::instances;

fn main() {
    let s = instances::basilica_capture(0.1).validate().unwrap();
    let run = run_pullback(&s, 60, 1e-9, None, &ContinuationOptions::default()).unwrap();
    for (k, (dc, dr)) in run.config_distances.iter().zip(&run.coefficient_distances).enumerate() {
        println!("t={:>2}  config {dc:.3e}  coefficients {dr:.3e}", k + 1);
    }
    let lim = run.limit();
    println!("converged {} after {} pullback steps", run.converged, run.integer_states.len() - 2);
    println!("limit R = {}", serde_json::to_string(&lim.map_r).unwrap());
    for (i, p) in lim.config_p.iter().enumerate() {
        println!("  mark {i} at {p}");
    }
}
