//! Green functions from the Böttcher charts of z² and z² − 1.

use num_complex::Complex64 as C64;
use semiconj::metric::{build_metric, green_function, GreenScaling, MetricOptions};
use semiconj::rational::{postcritical_analysis, RationalMap, RECURRENCE_TOLERANCE};
use semiconj::sphere::SpherePoint;
use semiconj::surgery::instances;

fn main() {
    let c = |x| C64::new(x, 0.0);
    let square = RationalMap::new(vec![c(0.0), c(0.0), c(1.0)], vec![c(1.0)]).unwrap();
    for (name, r) in [("z^2", square), ("z^2 - 1", instances::basilica_map())] {
        let p = postcritical_analysis(&r, 100, RECURRENCE_TOLERANCE).unwrap();
        let m = build_metric(&r, &p, &MetricOptions::default()).unwrap();
        println!("{name}");
        for z in [C64::new(2.0, 0.0), C64::new(0.3, 0.2), C64::new(1.0, 0.0), C64::new(-1.1, 0.05)] {
            let p = SpherePoint::finite(z);
            let g = green_function(&m, &p, 200, GreenScaling::ComponentDegree).unwrap();
            let gd = green_function(&m, &p, 200, GreenScaling::GlobalDegree).unwrap();
            println!("  G({z}) = {g:.10} (1/d^n rescaling {gd:.10})");
        }
    }
}
