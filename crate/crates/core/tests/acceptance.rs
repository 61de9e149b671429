//! Acceptance criteria 1–8, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.

use num_complex::Complex64 as C64;
use semiconj::metric::{build_metric, green_function, verify_expansion, GreenScaling, MetricOptions};
use semiconj::pullback::{run_pullback, ContinuationOptions, ThurstonRun};
use semiconj::rational::{postcritical_analysis, projective_distance, RationalMap, RECURRENCE_TOLERANCE};
use semiconj::report::{evaluate_checks, run_pipeline, Outcome, RunConfig, SurgerySource};
use semiconj::semiconj::{field_distance, sphere_cover, FieldOptions, FieldStack, MeshOptions, Tower};
use semiconj::sphere::SpherePoint;
use semiconj::surgery::{instances, pullback_curves, LiftOptions, Surgery};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

const TRIVIAL_TOL: f64 = 1e-10;
const TRIVIAL_STEPS: usize = 20;
const TRIVIAL_SAMPLES: usize = 10_000;
const TRIVIAL_TIME: Duration = Duration::from_secs(30);

const CAPTURE_TOL: f64 = 1e-9;
const CAPTURE_MAX_STEPS: usize = 60;
const CRITICALLY_FINITE_TOL: f64 = 1e-6;
const CAPTURE_TIME: Duration = Duration::from_secs(300);

const EXACT_STEP_TOL: f64 = 1e-8;
const LEVELS: usize = 6;

const DECAY_SLACK: f64 = 0.1;
const TAIL_FACTOR: f64 = 1.2;

const EXPANSION_SAMPLES: usize = 100_000;
const EXPANSION_SLACK: f64 = 0.05;
const EXPANSION_TIME: Duration = Duration::from_secs(60);

const CHART_TOL: f64 = 1e-8;
const GREEN_POINT_TOL: f64 = 1e-10;
const GREEN_SCALING_TOL: f64 = 1e-8;
const GREEN_SAMPLES: usize = 1000;

const INDEPENDENCE_TOL: f64 = 1e-6;
const TUBE: f64 = 0.1;

const BRANCH_DEFECT_TOL: f64 = 1e-7;

fn report(n: usize, passed: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if passed { "PASS" } else { "FAIL" });
}

fn capture_config() -> RunConfig {
    let mut cfg = RunConfig::new(SurgerySource::Named { instance: "basilica_capture".into(), tube_radius: Some(TUBE) });
    cfg.depth = LEVELS;
    cfg.tolerance = CAPTURE_TOL;
    cfg.max_steps = CAPTURE_MAX_STEPS;
    cfg
}

fn capture() -> &'static (Outcome, Duration) {
    static RUN: OnceLock<(Outcome, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let out = run_pipeline(&capture_config()).expect("capture pipeline");
        (out, t.elapsed())
    })
}

fn square() -> RationalMap {
    let c = |x| C64::new(x, 0.0);
    RationalMap::new(vec![c(0.0), c(0.0), c(1.0)], vec![c(1.0)]).unwrap()
}

fn capture_limit() -> RationalMap {
    capture().0.report.polished.clone()
}

#[test]
fn criterion_1_trivial_fixed_point() {
    let t = Instant::now();
    let mut cfg = RunConfig::new(SurgerySource::Named { instance: "basilica_trivial".into(), tube_radius: None });
    cfg.fixed_steps = Some(TRIVIAL_STEPS);
    cfg.max_steps = TRIVIAL_STEPS;
    cfg.density = 0.02;
    let out = run_pipeline(&cfg).expect("trivial pipeline");
    let elapsed = t.elapsed();
    let q = instances::basilica_map().flat();
    let maps = out.trace.run.maps();
    let coeff = maps.iter().map(|r| projective_distance(&r.flat(), &q)).fold(0.0, f64::max);
    let samples = out.stack.meshes.iter().map(|m| m.len()).min().unwrap();
    let identity = out.trace.identity_error;
    let passed = maps.len() >= TRIVIAL_STEPS
        && coeff < TRIVIAL_TOL
        && identity < TRIVIAL_TOL
        && samples >= TRIVIAL_SAMPLES
        && elapsed < TRIVIAL_TIME;
    report(
        1,
        passed,
        format!(
            "{} maps, coefficient distance {coeff:.2e}, identity error {identity:.2e} on {samples} samples, {:.1}s",
            maps.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
    assert!(out.report.passed, "{:?}", out.report.failed());
}

#[test]
fn criterion_2_capture_convergence() {
    let (out, elapsed) = capture();
    let run = &out.trace.run;
    let steps = run.integer_states.len() - 2;
    let defect = out.trace.portrait_defect;
    let passed =
        run.converged && steps <= CAPTURE_MAX_STEPS && defect < CRITICALLY_FINITE_TOL && out.trace.hyperbolic && *elapsed < CAPTURE_TIME;
    report(
        2,
        passed,
        format!(
            "converged in {steps} steps, critical orbit defect {defect:.2e}, hyperbolic {}, {:.1}s",
            out.trace.hyperbolic,
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_3_semiconjugacy_identity() {
    let (out, _) = capture();
    let res = &out.report.residuals;
    let exact = res.iter().map(|r| r.exact_step).fold(0.0, f64::max);
    let limits: Vec<f64> = res[2..=LEVELS].iter().map(|r| r.limit).collect();
    let decreasing = limits.windows(2).all(|w| w[1] < w[0]);
    let passed = res.len() == LEVELS + 1 && exact < EXACT_STEP_TOL && decreasing;
    let shown: Vec<String> = limits.iter().map(|l| format!("{l:.3}")).collect();
    report(3, passed, format!("exact step {exact:.2e}, limit residuals n=2..6 [{}]", shown.join(", ")));
    assert!(passed);
}

#[test]
fn criterion_4_geometric_decay() {
    let (out, _) = capture();
    let d = &out.report.decay;
    let e = d.expansion;
    let bound = 1.0 / e + DECAY_SLACK;
    let worst = d.table.ratios.iter().skip(d.burn_in).copied().fold(0.0, f64::max);
    let d0 = d.table.deltas[d.burn_in];
    let total: f64 = d.table.deltas.iter().skip(d.burn_in).sum();
    let tail = d0 * e / (e - 1.0) * TAIL_FACTOR;
    let passed = worst <= bound && total <= tail;
    report(
        4,
        passed,
        format!("E {e:.4}, worst ratio {worst:.3} ≤ {bound:.3}, tail sum {total:.3} ≤ {tail:.3}"),
    );
    assert!(passed);
}

#[test]
fn criterion_5_expanding_metric() {
    let mut lines = Vec::new();
    let mut passed = true;
    for (name, r, e1) in [("z^2", square(), 2.0f64), ("capture limit", capture_limit(), 2.0f64.sqrt())] {
        let t = Instant::now();
        let p = postcritical_analysis(&r, 100, RECURRENCE_TOLERANCE).unwrap();
        let m = build_metric(&r, &p, &MetricOptions::default()).unwrap();
        let rep = verify_expansion(&m, EXPANSION_SAMPLES, 7);
        let elapsed = t.elapsed();
        let rates_ok = m.cycle_rates.iter().zip(&m.charts).all(|(&c, ch)| !ch.periodic || (c - e1).abs() < 1e-12);
        let target = m.julia.theta.min(e1.sqrt());
        let ok = rates_ok && rep.min_ratio >= target - EXPANSION_SLACK && elapsed < EXPANSION_TIME;
        passed &= ok;
        lines.push(format!(
            "{name}: min ratio {:.4} vs E {target:.4} ({:.1}s)",
            rep.min_ratio,
            elapsed.as_secs_f64()
        ));
    }
    report(5, passed, lines.join("; "));
    assert!(passed);
}

#[test]
fn criterion_6_boettcher_and_green() {
    let mut worst_chart: f64 = 0.0;
    for r in [square(), capture_limit()] {
        let p = postcritical_analysis(&r, 100, RECURRENCE_TOLERANCE).unwrap();
        let m = build_metric(&r, &p, &MetricOptions::default()).unwrap();
        worst_chart = worst_chart.max(m.summary().chart_residual);
    }
    let r = square();
    let p = postcritical_analysis(&r, 100, RECURRENCE_TOLERANCE).unwrap();
    let m = build_metric(&r, &p, &MetricOptions::default()).unwrap();
    let g2 = green_function(&m, &SpherePoint::real(2.0), 200, GreenScaling::ComponentDegree).unwrap();
    let point_err = (g2 - 2.0f64.ln()).abs();
    let mut scaling_err: f64 = 0.0;
    for k in 0..GREEN_SAMPLES {
        let radius = 1.05 + 3.0 * (k as f64 + 0.5) / GREEN_SAMPLES as f64;
        let z = SpherePoint::finite(C64::from_polar(radius, 2.399963 * k as f64));
        let g = green_function(&m, &z, 200, GreenScaling::ComponentDegree).unwrap();
        let gz = green_function(&m, &r.evaluate(&z), 200, GreenScaling::ComponentDegree).unwrap();
        scaling_err = scaling_err.max((gz - 2.0 * g).abs());
    }
    let passed = worst_chart < CHART_TOL && point_err < GREEN_POINT_TOL && scaling_err < GREEN_SCALING_TOL;
    report(
        6,
        passed,
        format!("chart residual {worst_chart:.2e}, |G(2) − log 2| {point_err:.2e}, |G(z²) − 2G(z)| {scaling_err:.2e}"),
    );
    assert!(passed);
}

fn capture_stack(s: &Surgery, run: &ThurstonRun, exclusion: f64) -> FieldStack {
    let curves = pullback_curves(&s.spec.q, &s.spec.paths(), LEVELS, LiftOptions::default()).unwrap();
    let mut mesh = MeshOptions::for_surgery(s).unwrap();
    mesh.tube = Some(exclusion);
    let mut maps = run.maps();
    while maps.len() < LEVELS + 1 {
        maps.push(run.limit().map_r.clone());
    }
    let tower = Tower::new(&s.spec.q, &maps, &mesh.seeds);
    let opts = FieldOptions { regions: sphere_cover(), density: 0.04, mesh, refine: true };
    FieldStack::build(tower, &curves, LEVELS, &opts).unwrap()
}

#[test]
fn criterion_7_tube_independence() {
    let wide = instances::basilica_capture(TUBE).validate().unwrap();
    let narrow = instances::basilica_capture(TUBE / 2.0).validate().unwrap();
    let opts = ContinuationOptions::default();
    let a = run_pullback(&wide, CAPTURE_MAX_STEPS, CAPTURE_TOL, None, &opts).unwrap();
    let b = run_pullback(&narrow, CAPTURE_MAX_STEPS, CAPTURE_TOL, None, &opts).unwrap();
    let common = a.integer_states.len().min(b.integer_states.len());
    let trace = (0..common)
        .map(|k| {
            a.at(k).config_p.iter().zip(&b.at(k).config_p).map(|(x, y)| x.chordal(y)).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let sa = capture_stack(&wide, &a, TUBE);
    let sb = capture_stack(&narrow, &b, TUBE);
    let fields: Vec<f64> = (0..=LEVELS).map(|n| field_distance(&sa, &sb, n).unwrap()).collect();
    let worst = fields.iter().copied().fold(0.0, f64::max);
    let passed = trace < INDEPENDENCE_TOL && worst < INDEPENDENCE_TOL;
    report(
        7,
        passed,
        format!("trace distance {trace:.2e} over {common} integer times, field distance {worst:.2e} over levels 0..={LEVELS}"),
    );
    assert!(passed);
}

#[test]
fn criterion_8_trivial_monodromy() {
    let (out, _) = capture();
    let stack = &out.stack;
    let defect = stack.fields.iter().map(|f| f.max_defect).fold(0.0, f64::max);
    let consistent = stack.fields.iter().all(|f| f.consistent());
    let checks_agree = evaluate_checks(&out.trace) == out.report.checks;
    let passed = defect < BRANCH_DEFECT_TOL && consistent && stack.depth() == LEVELS && checks_agree;
    report(
        8,
        passed,
        format!("max branch defect {defect:.2e}, consistent {consistent}, refined levels {:?}", stack.refined),
    );
    assert!(passed);
}
