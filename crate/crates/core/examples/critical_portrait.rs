//! Critical points, postcritical portrait and hyperbolicity of z² − 1 and
//! of the capture limit (2z² − 2)/(z² + 2).

use num_complex::Complex64 as C64;
use semiconj::rational::{is_hyperbolic, postcritical_analysis, RationalMap, RECURRENCE_TOLERANCE};
use semiconj::surgery::instances;

fn show(name: &str, r: &RationalMap) {
    println!("{name}");
    for (c, m) in r.critical_points().unwrap() {
        println!("  critical {c} multiplicity {m} -> {}", r.evaluate(&c));
    }
    let p = postcritical_analysis(r, 100, RECURRENCE_TOLERANCE).unwrap();
    for (i, x) in p.points.iter().enumerate() {
        println!("  P[{i}] = {x} -> P[{}], local degree {}", p.successor[i], p.local_degree[i]);
    }
    println!("  closure defect {:.2e}", p.closure_defect(r));
    let h = is_hyperbolic(r, 2000, 1e-10).unwrap();
    println!("  hyperbolic {} with {} attracting cycles", h.hyperbolic, h.cycles.len());
}

fn main() {
    show("z^2 - 1", &instances::basilica_map());
    let c = |x| C64::new(x, 0.0);
    let limit = RationalMap::new(vec![c(-2.0), c(0.0), c(2.0)], vec![c(2.0), c(0.0), c(1.0)]).unwrap();
    show("(2z^2 - 2)/(z^2 + 2)", &limit);
}
