//! Run configuration, the full pipeline, run reports, traces and images.

use crate::metric::{build_metric, verify_expansion, ExpandingMetric, ExpansionReport, MetricOptions, MetricSummary};
use crate::pullback::{polish_critically_finite, run_pullback, ContinuationOptions, ThurstonRun};
use crate::rational::{is_hyperbolic, postcritical_analysis, projective_distance, RationalMap, RECURRENCE_TOLERANCE};
use crate::semiconj::{
    DECAY_NOISE,
    semiconjugacy_residual, sphere_cover, uniform_convergence_estimate, ChartRect, DecayTable, FieldOptions, FieldStack,
    MeshOptions, Residuals, Tower,
};
use crate::sphere::SpherePoint;
use crate::surgery::{instances, pullback_curves, CurveFamily, LiftOptions, Surgery, SurgerySpec};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

fn stage_err(stage: &str) -> impl Fn(&dyn std::fmt::Display) -> PipelineError + '_ {
    move |e| PipelineError::Stage { stage: stage.to_string(), message: e.to_string() }
}

/// Where the surgery comes from: a shipped instance by name or a full spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SurgerySource {
    Named {
        instance: String,
        #[serde(default)]
        tube_radius: Option<f64>,
    },
    Inline(SurgerySpec),
}

impl SurgerySource {
    pub fn spec(&self) -> Result<SurgerySpec, ConfigError> {
        match self {
            SurgerySource::Inline(s) => Ok(s.clone()),
            SurgerySource::Named { instance, tube_radius } => match instance.as_str() {
                "basilica_trivial" => Ok(instances::basilica_trivial()),
                "basilica_capture" => Ok(instances::basilica_capture(tube_radius.unwrap_or(0.1))),
                other => Err(ConfigError::Validation { field: "surgery.instance".into(), message: format!("unknown instance {other:?}") }),
            },
        }
    }
}

fn default_depth() -> usize {
    6
}
fn default_tolerance() -> f64 {
    1e-9
}
fn default_max_steps() -> usize {
    60
}
fn default_density() -> f64 {
    0.04
}
fn default_exclusion() -> f64 {
    0.1
}
fn default_expansion_samples() -> usize {
    100_000
}
fn default_burn_in() -> usize {
    2
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_seed() -> u64 {
    7
}
fn default_image_size() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub surgery: SurgerySource,
    /// Depth of the curve pullback and number of field levels.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Joint configuration/coefficient convergence tolerance.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Run exactly this many integer steps instead of stopping at convergence.
    #[serde(default)]
    pub fixed_steps: Option<usize>,
    /// Chordal mesh spacing of the fields.
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default)]
    pub metric: MetricOptions,
    /// Field distances are measured away from disks of this radius around
    /// the postcritical points, where the metric blows up.
    #[serde(default = "default_exclusion")]
    pub exclusion_radius: f64,
    #[serde(default = "default_expansion_samples")]
    pub expansion_samples: usize,
    /// Levels skipped before the decay ratios are checked.
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl RunConfig {
    pub fn new(surgery: SurgerySource) -> Self {
        Self {
            surgery,
            depth: default_depth(),
            tolerance: default_tolerance(),
            max_steps: default_max_steps(),
            fixed_steps: None,
            density: default_density(),
            metric: MetricOptions::default(),
            exclusion_radius: default_exclusion(),
            expansion_samples: default_expansion_samples(),
            burn_in: default_burn_in(),
            image_size: default_image_size(),
            out: default_out(),
            seed: default_seed(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, message: String| Err(ConfigError::Validation { field: field.into(), message });
        if self.depth < 1 {
            return bad("depth", "must be at least 1".into());
        }
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-3) {
            return bad("tolerance", format!("{} is outside (0, 1e-3]", self.tolerance));
        }
        if !(self.density > 0.0 && self.density <= 0.25) {
            return bad("density", format!("{} is outside (0, 0.25]", self.density));
        }
        if self.max_steps < 1 {
            return bad("max_steps", "must be at least 1".into());
        }
        if !(self.exclusion_radius >= 0.0) {
            return bad("exclusion_radius", "must be nonnegative".into());
        }
        if self.image_size == 0 {
            return bad("image_size", "must be positive".into());
        }
        self.surgery.spec()?;
        Ok(())
    }

    /// The validated surgery.
    pub fn surgery(&self) -> Result<Surgery, ConfigError> {
        self.surgery
            .spec()?
            .validate()
            .map_err(|e| ConfigError::Validation { field: "surgery".into(), message: e.to_string() })
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_str(text)
        .map_err(|e| {
        let text = e.to_string();
        let message = text.rsplit_once(" at line ").map_or(text.as_str(), |(m, _)| m).to_string();
        ConfigError::Parse { line: e.line(), column: e.column(), message }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text)
}

/// Pass/fail thresholds of the acceptance checks.
pub mod thresholds {
    /// Coefficient and field error of the trivial surgery.
    pub const TRIVIAL: f64 = 1e-10;
    /// Landing error of the critical orbits of the limit on the marks.
    pub const CRITICALLY_FINITE: f64 = 1e-6;
    pub const EXACT_STEP: f64 = 1e-8;
    /// Added to `1/E` for the decay ratio bound.
    pub const DECAY_SLACK: f64 = 0.1;
    /// Relative slack on `δ_{n₀}·E/(E−1)` for the tail sum.
    pub const TAIL_SLACK: f64 = 0.2;
    /// Subtracted from `E` for the sampled expansion bound.
    pub const EXPANSION_SLACK: f64 = 0.05;
    pub const CHART_RESIDUAL: f64 = 1e-8;
    pub const BRANCH_DEFECT: f64 = 1e-7;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub level: usize,
    pub samples: usize,
    pub unassigned: usize,
    pub max_margin: f64,
    pub max_defect: f64,
    pub consistent: bool,
    pub refined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSummary {
    pub samples: usize,
    pub min_ratio: f64,
    pub regimes: [f64; 4],
    /// `E = min(E₀, √E₁)`.
    pub target: f64,
}

/// Raw numbers behind a report, enough to recompute every check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub q: RationalMap,
    /// The push is the identity, so the limit must be `Q` and the fields the
    /// identity.
    pub trivial: bool,
    pub max_steps: usize,
    pub burn_in: usize,
    pub run: ThurstonRun,
    pub polished: RationalMap,
    /// Largest distance from a critical orbit image of the limit to the
    /// marks, and from the image of a mark to its successor.
    pub portrait_defect: f64,
    pub hyperbolic: bool,
    pub identity_error: f64,
    pub fields: Vec<FieldSummary>,
    pub residuals: Vec<Residuals>,
    pub postcritical: Vec<SpherePoint>,
    pub decay: DecayTable,
    pub metric: MetricSummary,
    pub expansion: ExpansionSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

fn check(name: &str, value: f64, threshold: f64, passed: bool) -> Check {
    let finite = |x: f64| if x.is_nan() { f64::MAX } else { x.clamp(-f64::MAX, f64::MAX) };
    Check { name: name.into(), passed, value: finite(value), threshold: finite(threshold) }
}

/// Recomputes every acceptance check from the raw trace.
pub fn evaluate_checks(trace: &Trace) -> Vec<Check> {
    use thresholds::*;
    let mut out = Vec::new();
    let steps = trace.run.integer_states.len().saturating_sub(2);
    out.push(check("converged", steps as f64, trace.max_steps as f64, trace.run.converged && steps <= trace.max_steps));
    out.push(check(
        "critically_finite",
        trace.portrait_defect,
        CRITICALLY_FINITE,
        trace.portrait_defect < CRITICALLY_FINITE && trace.hyperbolic,
    ));
    let exact = trace.residuals.iter().map(|r| r.exact_step).fold(0.0, f64::max);
    out.push(check("exact_step_residual", exact, EXACT_STEP, exact < EXACT_STEP));
    let limits: Vec<f64> = trace.residuals.iter().map(|r| r.limit).collect();
    if trace.trivial {
        let q = trace.q.flat();
        let coeff = trace.run.maps().iter().map(|r| projective_distance(&r.flat(), &q)).fold(0.0, f64::max);
        out.push(check("limit_equals_q", coeff, TRIVIAL, coeff < TRIVIAL));
        out.push(check("identity_field", trace.identity_error, TRIVIAL, trace.identity_error < TRIVIAL));
        let worst = limits.iter().copied().fold(0.0, f64::max);
        out.push(check("limit_residual", worst, TRIVIAL, worst < TRIVIAL));
    } else {
        let tail = limits.get(2..).unwrap_or(&[]);
        let decreasing = tail.len() >= 2 && tail.windows(2).all(|w| w[1] < w[0]);
        out.push(check("limit_residual_decreasing", tail.last().copied().unwrap_or(f64::MAX), 0.0, decreasing));
    }
    let e = trace.expansion.target;
    let bound = 1.0 / e + DECAY_SLACK;
    let worst_ratio = trace.decay.ratios.iter().skip(trace.burn_in).copied().fold(0.0, f64::max);
    out.push(check("decay_ratios", worst_ratio, bound, trace.decay.ratios_within(bound, trace.burn_in)));
    let floor = |d: f64| if d > DECAY_NOISE { d } else { 0.0 };
    let d0 = floor(trace.decay.deltas.get(trace.burn_in).copied().unwrap_or(0.0));
    let total: f64 = trace.decay.deltas.iter().skip(trace.burn_in).map(|&d| floor(d)).sum();
    out.push(check(
        "decay_tail",
        total,
        d0 * e / (e - 1.0) * (1.0 + TAIL_SLACK),
        trace.decay.tail_within(e, trace.burn_in, TAIL_SLACK),
    ));
    let floor = e - EXPANSION_SLACK;
    out.push(check("expansion", trace.expansion.min_ratio, floor, trace.expansion.min_ratio >= floor));
    out.push(check(
        "chart_residual",
        trace.metric.chart_residual,
        CHART_RESIDUAL,
        trace.metric.chart_residual < CHART_RESIDUAL,
    ));
    let defect = trace.fields.iter().map(|f| f.max_defect).fold(0.0, f64::max);
    let consistent = trace.fields.iter().all(|f| f.consistent);
    out.push(check("branch_defects", defect, BRANCH_DEFECT, defect < BRANCH_DEFECT && consistent));
    out
}

/// Critical-finiteness error of `r` against `marks`: each mark must map to
/// its successor and each critical value must land on a mark.
pub fn portrait_defect(r: &RationalMap, marks: &[SpherePoint], successor: &[usize]) -> f64 {
    let closure = marks.iter().zip(successor).map(|(p, &j)| r.evaluate(p).chordal(&marks[j])).fold(0.0, f64::max);
    let landing = r
        .critical_points()
        .map(|cps| {
            cps.iter()
                .map(|(c, _)| {
                    let v = r.evaluate(c);
                    marks.iter().map(|m| m.chordal(&v)).fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        })
        .unwrap_or(f64::MAX);
    closure.max(landing).min(f64::MAX)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    /// Distances are between times `t − 1` and `t`.
    pub t: usize,
    pub config_distance: f64,
    pub coefficient_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecaySection {
    pub expansion: f64,
    pub ratio_bound: f64,
    pub burn_in: usize,
    pub table: DecayTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub limit: RationalMap,
    pub polished: RationalMap,
    pub polished_marks: Vec<SpherePoint>,
    pub steps: usize,
    pub converged: bool,
    pub convergence: Vec<ConvergenceRow>,
    pub residuals: Vec<Residuals>,
    pub fields: Vec<FieldSummary>,
    pub decay: DecaySection,
    pub metric: MetricSummary,
    pub expansion: ExpansionSummary,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl RunReport {
    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Wall-clock seconds per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.0.push((stage.to_string(), t.elapsed().as_secs_f64()));
        out
    }
}

/// Everything one run produces.
pub struct Outcome {
    pub report: RunReport,
    pub trace: Trace,
    pub timings: Timings,
    pub surgery: Surgery,
    pub curves: CurveFamily,
    pub stack: FieldStack,
    pub metric: ExpandingMetric,
    pub expansion: ExpansionReport,
}

fn summarize_fields(stack: &FieldStack) -> Vec<FieldSummary> {
    stack
        .fields
        .iter()
        .enumerate()
        .map(|(n, f)| FieldSummary {
            level: n,
            samples: stack.meshes[n].len(),
            unassigned: f.unassigned,
            max_margin: f.max_margin,
            max_defect: f.max_defect,
            consistent: f.consistent(),
            refined: stack.refined.contains(&n),
        })
        .collect()
}

/// Curves and fields of a finished pullback run, padding the tower with the
/// limit map when the run is shorter than the depth.
pub fn build_fields(
    cfg: &RunConfig,
    surgery: &Surgery,
    run: &ThurstonRun,
    timings: &mut Timings,
) -> Result<(CurveFamily, FieldStack), PipelineError> {
    let spec = &surgery.spec;
    let lim = run.limit();
    let curves = timings
        .time("curves", || pullback_curves(&spec.q, &spec.paths(), cfg.depth, LiftOptions::default()))
        .map_err(|e| stage_err("curves")(&e))?;

    let stack = timings
        .time("fields", || -> Result<FieldStack, PipelineError> {
            let mut maps = run.maps();
            while maps.len() < cfg.depth + 1 {
                maps.push(lim.map_r.clone());
            }
            let mesh = MeshOptions::for_surgery(surgery).map_err(|e| stage_err("fields")(&e))?;
            let tower = Tower::new(&spec.q, &maps, &mesh.seeds);
            let opts = FieldOptions { regions: sphere_cover(), density: cfg.density, mesh, refine: true };
            FieldStack::build(tower, &curves, cfg.depth, &opts).map_err(|e| stage_err("fields")(&e))
        })?;
    Ok((curves, stack))
}

/// What a run had produced when a stage failed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Partial {
    pub failed_stage: Option<String>,
    pub message: Option<String>,
    pub run: Option<ThurstonRun>,
    pub polished: Option<RationalMap>,
    pub fields: Option<Vec<FieldSummary>>,
    pub residuals: Option<Vec<Residuals>>,
    pub metric: Option<MetricSummary>,
    pub timings: Timings,
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    run_pipeline_with(cfg, &mut Partial::default())
}

/// Runs the pipeline into `dir`. On a stage failure `partial.json` keeps
/// the results of the stages that finished.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path) -> Result<(Outcome, Vec<PathBuf>), PipelineError> {
    let mut partial = Partial::default();
    match run_pipeline_with(cfg, &mut partial) {
        Ok(outcome) => {
            let files = write_outputs(&outcome, dir, cfg.image_size).map_err(|e| stage_err("output")(&e))?;
            Ok((outcome, files))
        }
        Err(e) => {
            if let PipelineError::Stage { stage, message } = &e {
                partial.failed_stage = Some(stage.clone());
                partial.message = Some(message.clone());
                std::fs::create_dir_all(dir)
                    .and_then(|_| std::fs::write(dir.join("partial.json"), json(&partial)))
                    .map_err(|e| stage_err("output")(&e))?;
            }
            Err(e)
        }
    }
}

fn run_pipeline_with(cfg: &RunConfig, partial: &mut Partial) -> Result<Outcome, PipelineError> {
    cfg.validate()?;
    let surgery = cfg.surgery()?;
    let spec = &surgery.spec;
    let timings = &mut partial.timings;

    let run = timings
        .time("pullback", || run_pullback(&surgery, cfg.max_steps, cfg.tolerance, cfg.fixed_steps, &ContinuationOptions::default()))
        .map_err(|e| stage_err("pullback")(&e))?;
    let lim = run.limit().clone();
    partial.run = Some(run.clone());
    let timings = &mut partial.timings;
    let defect = portrait_defect(&lim.map_r, &lim.config_p, &spec.successor);

    let (polished, marks) = timings
        .time("polish", || {
            polish_critically_finite(&lim.map_r, &lim.config_p, &spec.successor, &spec.local_degree, &spec.normalization)
        })
        .map_err(|e| stage_err("polish")(&e))?;
    partial.polished = Some(polished.clone());
    let hyperbolic = is_hyperbolic(&polished, 2000, 1e-10).map_err(|e| stage_err("hyperbolicity")(&e))?.hyperbolic;

    let (curves, stack) = build_fields(cfg, &surgery, &run, timings)?;
    partial.fields = Some(summarize_fields(&stack));
    let timings = &mut partial.timings;
    let residuals = timings
        .time("residuals", || (0..=cfg.depth).map(|n| semiconjugacy_residual(&stack, n)).collect::<Result<Vec<_>, _>>())
        .map_err(|e| stage_err("residuals")(&e))?;
    partial.residuals = Some(residuals.clone());
    let timings = &mut partial.timings;
    let identity_error = stack
        .meshes
        .iter()
        .zip(&stack.fields)
        .flat_map(|(m, f)| m.samples.iter().zip(&f.values))
        .map(|(p, v)| v.map_or(f64::MAX, |v| p.chordal(&v)))
        .fold(0.0, f64::max);

    let portrait = postcritical_analysis(&polished, 100, RECURRENCE_TOLERANCE).map_err(|e| stage_err("metric")(&e))?;
    let metric = timings
        .time("metric", || build_metric(&polished, &portrait, &cfg.metric))
        .map_err(|e| stage_err("metric")(&e))?;
    let summary = metric.summary();
    partial.metric = Some(summary.clone());
    let timings = &mut partial.timings;
    let decay = timings
        .time("decay", || uniform_convergence_estimate(&stack, &metric, &portrait.points, cfg.exclusion_radius))
        .map_err(|e| stage_err("decay")(&e))?;
    let expansion = timings.time("expansion", || verify_expansion(&metric, cfg.expansion_samples, cfg.seed));
    let expansion_summary = ExpansionSummary {
        samples: expansion.samples,
        min_ratio: expansion.min_ratio,
        regimes: expansion.regimes,
        target: summary.expansion,
    };

    let fields = summarize_fields(&stack);
    let trace = Trace {
        q: spec.q.clone(),
        trivial: spec.paths().iter().all(|p| p.is_trivial()),
        max_steps: cfg.max_steps,
        burn_in: cfg.burn_in,
        run,
        polished: polished.clone(),
        portrait_defect: defect,
        hyperbolic,
        identity_error,
        fields: fields.clone(),
        residuals: residuals.clone(),
        postcritical: portrait.points.clone(),
        decay: decay.clone(),
        metric: summary.clone(),
        expansion: expansion_summary.clone(),
    };
    let checks = evaluate_checks(&trace);
    let e = summary.expansion;
    let report = RunReport {
        limit: lim.map_r.clone(),
        polished,
        polished_marks: marks,
        steps: trace.run.integer_states.len().saturating_sub(2),
        converged: trace.run.converged,
        convergence: trace
            .run
            .config_distances
            .iter()
            .zip(&trace.run.coefficient_distances)
            .enumerate()
            .map(|(k, (&c, &d))| ConvergenceRow { t: k + 1, config_distance: c, coefficient_distance: d })
            .collect(),
        residuals,
        fields,
        decay: DecaySection { expansion: e, ratio_bound: 1.0 / e + thresholds::DECAY_SLACK, burn_in: cfg.burn_in, table: decay },
        metric: summary,
        expansion: expansion_summary,
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    Ok(Outcome { report, trace, timings: timings.clone(), surgery, curves, stack, metric, expansion })
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match h as usize {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Domain colouring of `Φ_n` on `|Re z|, |Im z| ≤ half`: hue from the
/// argument of the value, brightness bands from `log₂|w|`, cut tubes black
/// and unassigned samples grey. Returns a binary PPM.
pub fn render_field(stack: &FieldStack, n: usize, size: usize, half: f64) -> Vec<u8> {
    use rayon::prelude::*;
    let rect = ChartRect::square(half);
    let mesh = &stack.meshes[n];
    let field = &stack.fields[n];
    let pixels: Vec<[u8; 3]> = (0..size * size)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % size, k / size);
            let c = C64::new(
                -half + 2.0 * half * (i as f64 + 0.5) / size as f64,
                half - 2.0 * half * (j as f64 + 0.5) / size as f64,
            );
            let p = rect.to_point(c);
            if n > 0 && stack.index.distance(&p, n, mesh.tube) < mesh.tube {
                return [0, 0, 0];
            }
            match mesh.nearest_sample(&p).and_then(|s| field.values[s]) {
                None => [128, 128, 128],
                Some(w) => match w.affine() {
                    None => [255, 255, 255],
                    Some(w) => {
                        let band = (w.norm().log2()).rem_euclid(1.0);
                        hsv(w.arg() / (2.0 * std::f64::consts::PI), 0.85, 0.6 + 0.4 * band)
                    }
                },
            }
        })
        .collect();
    let mut out = format!("P6\n{size} {size}\n255\n").into_bytes();
    out.extend(pixels.iter().flatten());
    out
}

/// `bin_low,bin_high,count` rows of the sampled expansion ratios.
pub fn expansion_histogram(ratios: &[f64], bins: usize) -> String {
    let finite: Vec<f64> = ratios.iter().copied().filter(|r| r.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::from("bin_low,bin_high,count\n");
    if finite.is_empty() {
        return out;
    }
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut counts = vec![0usize; bins];
    for r in &finite {
        counts[(((r - lo) / width) as usize).min(bins - 1)] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", lo + b as f64 * width, lo + (b + 1) as f64 * width, c));
    }
    out
}

#[derive(Serialize)]
struct FieldTable<'a> {
    level: usize,
    samples: &'a [SpherePoint],
    values: &'a [Option<SpherePoint>],
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> std::io::Result<()> {
    std::fs::write(&path, bytes)?;
    written.push(path);
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("report types serialize");
    s.push(b'\n');
    s
}

/// Writes the report, trace, timings, field table, images and histogram.
/// Everything but `timings.json` is a deterministic function of the config.
pub fn write_outputs(outcome: &Outcome, dir: &Path, image_size: usize) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    write(dir.join("report.json"), &json(&outcome.report), &mut written)?;
    write(dir.join("trace.json"), &json(&outcome.trace), &mut written)?;
    write(dir.join("timings.json"), &json(&outcome.timings), &mut written)?;
    let top = outcome.stack.depth();
    let table = FieldTable {
        level: top,
        samples: &outcome.stack.meshes[top].samples,
        values: &outcome.stack.fields[top].values,
    };
    write(dir.join("field_table.json"), &json(&table), &mut written)?;
    write_images(&outcome.stack, dir, image_size, &mut written)?;
    write(
        dir.join("expansion_histogram.csv"),
        expansion_histogram(&outcome.expansion.ratios, 50).as_bytes(),
        &mut written,
    )?;
    Ok(written)
}

pub fn write_images(stack: &FieldStack, dir: &Path, size: usize, written: &mut Vec<PathBuf>) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for n in 0..=stack.depth() {
        write(dir.join(format!("field_{n}.ppm")), &render_field(stack, n, size, 2.0), written)?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("report.json disagrees with the checks recomputed from trace.json: {0}")]
    Mismatch(String),
}

/// Recomputes the checks of a finished run from its `trace.json` and
/// compares them with `report.json`.
pub fn check_outputs(dir: &Path) -> Result<Vec<Check>, CheckError> {
    fn read<T: for<'de> Deserialize<'de>>(path: PathBuf) -> Result<T, CheckError> {
        let err = |m: String| CheckError::Read { path: path.display().to_string(), message: m };
        let text = std::fs::read_to_string(&path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
    let trace: Trace = read(dir.join("trace.json"))?;
    let report: RunReport = read(dir.join("report.json"))?;
    let checks = evaluate_checks(&trace);
    if checks.len() != report.checks.len() {
        return Err(CheckError::Mismatch(format!("{} checks vs {}", checks.len(), report.checks.len())));
    }
    for (a, b) in checks.iter().zip(&report.checks) {
        let same = a.name == b.name
            && a.passed == b.passed
            && a.value == b.value
            && a.threshold == b.threshold;
        if !same {
            return Err(CheckError::Mismatch(format!("{a:?} vs {b:?}")));
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primary_hues() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv(1.0 / 3.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv(2.0 / 3.0, 1.0, 1.0), [0, 0, 255]);
        assert_eq!(hsv(-1.0 / 3.0, 1.0, 1.0), hsv(2.0 / 3.0, 1.0, 1.0));
    }

    #[test]
    fn exact_portrait_has_no_defect() {
        let q = instances::basilica_map();
        let marks = [SpherePoint::real(-1.0), SpherePoint::real(0.0), SpherePoint::infinity()];
        assert_eq!(portrait_defect(&q, &marks, &[1, 0, 2]), 0.0);
        let off = [SpherePoint::real(-1.0), SpherePoint::real(0.01), SpherePoint::infinity()];
        assert!(portrait_defect(&q, &off, &[1, 0, 2]) > 1e-3);
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = parse_config(r#"{"surgery": {"instance": "basilica_capture"}, "metric": {"m_max": 4}}"#).unwrap();
        assert_eq!(cfg.depth, 6);
        assert_eq!(cfg.metric.m_max, 4);
        assert_eq!(cfg.metric.order, MetricOptions::default().order);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn check_values_stay_finite() {
        let c = check("x", f64::INFINITY, f64::NAN, false);
        assert_eq!((c.value, c.threshold), (f64::MAX, f64::MAX));
        let back: Check = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
