use num_complex::Complex64 as C64;
use proptest::prelude::*;
use semiconj::metric::{build_metric, lambda_weights, ExpandingMetric, MetricOptions, Region};
use semiconj::pullback::{run_pullback, ContinuationOptions};
use semiconj::rational::{postcritical_analysis, RationalMap, RECURRENCE_TOLERANCE};
use semiconj::semiconj::{sphere_cover, FieldOptions, FieldStack, MeshOptions, Tower};
use semiconj::sphere::SpherePoint;
use semiconj::surgery::{instances, pullback_curves, CurveFamily, LiftOptions};
use std::sync::OnceLock;

fn point() -> impl Strategy<Value = SpherePoint> {
    (-4.0f64..4.0, -4.0f64..4.0).prop_map(|(x, y)| SpherePoint::finite(C64::new(x, y)))
}

fn capture_limit() -> RationalMap {
    let c = |x| C64::new(x, 0.0);
    RationalMap::new(vec![c(-2.0), c(0.0), c(2.0)], vec![c(2.0), c(0.0), c(1.0)]).unwrap()
}

fn metric() -> &'static ExpandingMetric {
    static M: OnceLock<ExpandingMetric> = OnceLock::new();
    M.get_or_init(|| {
        let r = capture_limit();
        let p = postcritical_analysis(&r, 100, RECURRENCE_TOLERANCE).unwrap();
        build_metric(&r, &p, &MetricOptions::default()).unwrap()
    })
}

fn stack() -> &'static (FieldStack, CurveFamily) {
    static S: OnceLock<(FieldStack, CurveFamily)> = OnceLock::new();
    S.get_or_init(|| {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let run = run_pullback(&s, 60, 1e-9, None, &ContinuationOptions::default()).unwrap();
        let curves = pullback_curves(&s.spec.q, &s.spec.paths(), 4, LiftOptions::default()).unwrap();
        let mesh = MeshOptions::for_surgery(&s).unwrap();
        let tower = Tower::new(&s.spec.q, &run.maps(), &mesh.seeds);
        let opts = FieldOptions { regions: sphere_cover(), density: 0.04, mesh, refine: true };
        (FieldStack::build(tower, &curves, 4, &opts).unwrap(), curves)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centered_chart_is_an_isometry(p in point(), a in point(), b in point()) {
        let m = p.centered_chart();
        prop_assert!(m.apply(&p).chordal(&SpherePoint::real(0.0)) < 1e-12);
        prop_assert!((m.apply(&a).chordal(&m.apply(&b)) - a.chordal(&b)).abs() < 1e-12);
    }

    #[test]
    fn points_survive_json(p in point(), tiny in -300i32..-1) {
        let near_inf = SpherePoint::new(C64::new(1.0, 0.0), C64::new(10f64.powi(tiny), 0.0));
        for q in [p, near_inf, SpherePoint::infinity()] {
            let back: SpherePoint = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
            prop_assert!(back.chordal(&q) < 1e-15);
        }
    }

    #[test]
    fn preimages_map_back(y in point()) {
        let r = capture_limit();
        let pre = r.preimages(&y).unwrap();
        prop_assert_eq!(pre.iter().map(|x| x.1).sum::<usize>(), 2);
        for (x, _) in pre {
            prop_assert!(r.evaluate(&x).chordal(&y) < 1e-10);
        }
    }

    #[test]
    fn lambda_scales_with_anchor(anchor in 0.1f64..10.0) {
        let r = capture_limit();
        let p = postcritical_analysis(&r, 100, RECURRENCE_TOLERANCE).unwrap();
        let one = lambda_weights(&p, 1.0);
        for (a, b) in lambda_weights(&p, anchor).iter().zip(&one) {
            prop_assert!((a - anchor * b).abs() < 1e-12 * anchor.max(1.0));
        }
    }

    #[test]
    fn metric_expands_at_random_points(z in point()) {
        let m = metric();
        prop_assume!(!matches!(m.region(&z), Region::Postcritical(_)));
        prop_assume!(!matches!(m.region(&m.map.evaluate(&z)), Region::Postcritical(_)));
        prop_assert!(m.ratio(&z) >= m.expansion - 0.05, "ratio {} at {}", m.ratio(&z), z);
    }

    #[test]
    fn fields_satisfy_the_step_identity(z in point(), n in 1usize..=4) {
        let (s, curves) = stack();
        prop_assume!(curves.distance_to(&z, n) > s.meshes[n].tube);
        let Some(v) = s.value(n, &z) else { return Ok(()) };
        let Some(w) = s.value(n - 1, &s.tower.q.evaluate(&z)) else { return Ok(()) };
        let lhs = s.tower.maps[n - 1].evaluate(&v);
        prop_assert!(lhs.chordal(&w) < 1e-8, "{} vs {} at {}", lhs, w, z);
    }
}
