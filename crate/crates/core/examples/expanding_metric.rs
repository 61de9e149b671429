//! Expanding metrics for z², z² − 1 and the capture limit, checked on
//! random tangent vectors.

use num_complex::Complex64 as C64;
use semiconj::metric::{build_metric, verify_expansion, MetricOptions};
use semiconj::rational::{postcritical_analysis, RationalMap, RECURRENCE_TOLERANCE};
use semiconj::surgery::instances;

fn main() {
    let c = |x| C64::new(x, 0.0);
    let maps = [
        ("z^2", RationalMap::new(vec![c(0.0), c(0.0), c(1.0)], vec![c(1.0)]).unwrap()),
        ("z^2 - 1", instances::basilica_map()),
        ("(2z^2 - 2)/(z^2 + 2)", RationalMap::new(vec![c(-2.0), c(0.0), c(2.0)], vec![c(2.0), c(0.0), c(1.0)]).unwrap()),
    ];
    for (name, r) in maps {
        let p = postcritical_analysis(&r, 100, RECURRENCE_TOLERANCE).unwrap();
        let m = build_metric(&r, &p, &MetricOptions::default()).unwrap();
        let s = m.summary();
        let rep = verify_expansion(&m, 100_000, 7);
        println!(
            "{name}: m={} theta={:.4} pull_depth={} eps={:.3e} E={:.4} min ratio {:.4} regimes {:?}",
            s.m, s.theta, s.pull_depth, s.epsilon, s.expansion, rep.min_ratio, rep.regimes
        );
    }
}
