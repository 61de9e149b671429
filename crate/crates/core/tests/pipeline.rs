use num_complex::Complex64 as C64;
use semiconj::pullback::{run_pullback, ContinuationOptions};
use semiconj::report::{
    check_outputs, expansion_histogram, load_config, parse_config, render_field, run_to_dir, ConfigError, PipelineError,
    RunConfig, SurgerySource,
};
use semiconj::surgery::instances;
use std::path::{Path, PathBuf};

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("semiconj-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn small_trivial() -> RunConfig {
    let mut cfg = RunConfig::new(SurgerySource::Named { instance: "basilica_trivial".into(), tube_radius: None });
    cfg.depth = 2;
    cfg.fixed_steps = Some(3);
    cfg.max_steps = 3;
    cfg.density = 0.08;
    cfg.expansion_samples = 5000;
    cfg.image_size = 64;
    cfg
}

#[test]
fn shipped_configs_are_valid() {
    let trivial = load_config(&shipped("trivial.json")).unwrap();
    assert!(trivial.surgery().unwrap().spec.push.pushes.is_empty());
    let capture = load_config(&shipped("basilica_capture.json")).unwrap();
    assert_eq!(capture.surgery().unwrap().spec.marked.len(), 4);
}

#[test]
fn bad_configs_are_rejected() {
    let zero = parse_config(r#"{"surgery": {"instance": "basilica_trivial"}, "density": 0}"#);
    assert!(matches!(zero, Err(ConfigError::Validation { ref field, .. }) if field == "density"));
    let typo = parse_config("{\n  \"surgery\": {\"instance\": \"basilica_trivial\"},\n  \"dept\": 3\n}");
    assert!(matches!(typo, Err(ConfigError::Parse { line: 3, .. })), "{typo:?}");
    let unknown = parse_config(r#"{"surgery": {"instance": "nothing"}}"#);
    assert!(matches!(unknown, Err(ConfigError::Validation { .. })));
    let tol = parse_config(r#"{"surgery": {"instance": "basilica_trivial"}, "tolerance": 0.01}"#);
    assert!(matches!(tol, Err(ConfigError::Validation { ref field, .. }) if field == "tolerance"));
}

#[test]
fn two_marked_points_are_rejected() {
    let mut spec = instances::basilica_trivial();
    spec.marked.truncate(2);
    spec.successor = vec![1, 0];
    spec.local_degree.truncate(2);
    let text = serde_json::json!({ "surgery": spec }).to_string();
    let cfg = parse_config(&text).unwrap();
    assert!(cfg.surgery().is_err());
    assert!(matches!(semiconj::report::run_pipeline(&cfg), Err(PipelineError::Config(_))));
}

#[test]
fn runs_are_deterministic_and_checkable() {
    let cfg = small_trivial();
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    let (out, files) = run_to_dir(&cfg, &a).unwrap();
    run_to_dir(&cfg, &b).unwrap();
    assert!(out.report.passed, "{:?}", out.report.failed());
    for f in &files {
        let name = f.file_name().unwrap();
        if name == "timings.json" {
            continue;
        }
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name:?} differs");
    }
    let checks = check_outputs(&a).unwrap();
    assert_eq!(checks, out.report.checks);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert!(report.get("timings").is_none());
    assert!(a.join("field_2.ppm").exists() && a.join("expansion_histogram.csv").exists());
}

#[test]
fn edited_report_fails_the_check() {
    let dir = scratch("edit");
    run_to_dir(&small_trivial(), &dir).unwrap();
    let path = dir.join("report.json");
    let mut report: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    report["checks"][0]["passed"] = serde_json::Value::Bool(false);
    std::fs::write(&path, serde_json::to_vec(&report).unwrap()).unwrap();
    assert!(check_outputs(&dir).is_err());
}

#[test]
fn stage_failure_keeps_partial_results() {
    let mut cfg = RunConfig::new(SurgerySource::Named { instance: "basilica_capture".into(), tube_radius: None });
    cfg.max_steps = 5;
    let dir = scratch("partial");
    let err = run_to_dir(&cfg, &dir).err().unwrap();
    assert!(matches!(err, PipelineError::Stage { ref stage, .. } if stage == "pullback"));
    let partial: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("partial.json")).unwrap()).unwrap();
    assert_eq!(partial["failed_stage"], "pullback");
}

#[test]
fn trivial_report_limit_is_q() {
    let (out, _) = run_to_dir(&small_trivial(), &scratch("limit")).unwrap();
    assert_eq!(out.report.limit, instances::basilica_map());
    assert!(out.report.residuals.iter().all(|r| r.exact_step < 1e-10 && r.limit < 1e-10));
}

#[test]
fn identity_field_renders_the_hue_wheel() {
    let (out, _) = run_to_dir(&small_trivial(), &scratch("wheel")).unwrap();
    let size = 64;
    let img = render_field(&out.stack, 0, size, 2.0);
    let header = format!("P6\n{size} {size}\n255\n");
    assert!(img.starts_with(header.as_bytes()));
    let px = |c: C64| {
        let i = ((c.re + 2.0) / 4.0 * size as f64) as usize;
        let j = ((2.0 - c.im) / 4.0 * size as f64) as usize;
        let k = header.len() + 3 * (j * size + i);
        [img[k] as i32, img[k + 1] as i32, img[k + 2] as i32]
    };
    let east = px(C64::new(1.3, 0.05));
    let west = px(C64::new(-1.3, 0.05));
    let north = px(C64::new(0.05, 1.3));
    assert!(east[0] > east[1] && east[0] > east[2], "{east:?}");
    assert!(west[0] < west[1] && west[0] < west[2], "{west:?}");
    assert!(north[1] > north[2], "{north:?}");
    assert_eq!(img, render_field(&out.stack, 0, size, 2.0));
}

#[test]
fn histogram_counts_every_ratio() {
    let csv = expansion_histogram(&[1.0, 1.5, 2.0, 2.0, f64::INFINITY], 4);
    let total: usize = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 4);
}

#[test]
fn pullback_trace_invariants() {
    let s = instances::basilica_capture(0.1).validate().unwrap();
    let run = run_pullback(&s, 60, 1e-9, None, &ContinuationOptions::default()).unwrap();
    let fixed: Vec<_> = s.spec.normalization.iter().map(|&i| s.spec.marked[i]).collect();
    let mut worst: f64 = 0.0;
    for (k, st) in run.trace.states.iter().enumerate() {
        for (&i, p) in s.spec.normalization.iter().zip(&fixed) {
            assert_eq!(st.config_p[i], *p, "normalization moved at state {k}");
        }
        for (y, label) in s.labels.iter().enumerate() {
            worst = worst.max(st.map_r.evaluate(&st.config_pre[y]).chordal(&st.config_p[label.image]));
        }
        if k > 0 {
            assert!(st.t > run.trace.states[k - 1].t);
        }
    }
    assert!(worst < 1e-10, "commutation residual {worst:.2e}");
    let ratios = run.decay_ratios();
    assert!(ratios.iter().skip(5).all(|&r| r <= 0.9), "{ratios:?}");
}
