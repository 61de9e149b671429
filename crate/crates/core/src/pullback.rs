//! Thurston's pullback iteration realized as Newton continuation on the
//! coefficients of `R_t` and the positions of the preimage marks.

use crate::rational::{projective_distance, RationalError, RationalMap};
use crate::sphere::{slerp, SpherePoint};
use crate::surgery::Surgery;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PullbackError {
    #[error("Newton diverged (last residual {0:.3e})")]
    NewtonDiverged(f64),
    #[error("configuration collision: labels {0} and {1} within {2:.3e}")]
    ConfigurationCollision(usize, usize, f64),
    #[error("continuation stuck at t = {t} (step {step:.3e})")]
    ContinuationStuck { t: f64, step: f64 },
    #[error("not converged after {steps} steps; distances {distances:?}")]
    NotConverged { steps: usize, distances: Vec<f64> },
    #[error("target does not respect the normalization at mark {0}")]
    NormalizationBroken(usize),
    #[error(transparent)]
    Rational(#[from] RationalError),
}

/// `R_t` together with the marks on `P` and on the preimage labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackState {
    pub t: f64,
    pub config_p: Vec<SpherePoint>,
    pub config_pre: Vec<SpherePoint>,
    pub map_r: RationalMap,
    pub newton_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Isotopy,
    Thurston,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationTrace {
    pub states: Vec<PullbackState>,
    pub step_sizes: Vec<f64>,
    pub stages: Vec<Stage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub collision: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 40,
            collision: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuationOptions {
    /// Grid resolution of the isotopy stage.
    pub steps: usize,
    pub min_step: f64,
    /// Largest accepted chordal move of any mark in one continuation step.
    pub max_move: f64,
    pub solver: SolverOptions,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            steps: 64,
            min_step: 1e-6,
            max_move: 0.05,
            solver: SolverOptions::default(),
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Chart coordinate of a label: `(uses chart at ∞, coordinate)`.
fn chart_of(p: &SpherePoint) -> (bool, C64) {
    if p.v() == C64::new(1.0, 0.0) {
        (false, p.u())
    } else {
        (true, p.v())
    }
}

fn from_chart(inf: bool, x: C64) -> SpherePoint {
    if inf {
        SpherePoint::new(C64::new(1.0, 0.0), x)
    } else {
        SpherePoint::finite(x)
    }
}

struct System<'a> {
    surgery: &'a Surgery,
    target: &'a [SpherePoint],
    /// Per-label chart choice and, for fixed labels, the fixed coordinate.
    charts: Vec<bool>,
    fixed: Vec<Option<C64>>,
    /// Position in the unknown vector of each free label.
    slot: Vec<Option<usize>>,
    reference: Vec<C64>,
    ncoef: usize,
}

impl<'a> System<'a> {
    fn new(surgery: &'a Surgery, target: &'a [SpherePoint], guess: &PullbackState) -> Self {
        let d = surgery.degree();
        let ncoef = 2 * d + 2;
        let mut charts = Vec::new();
        let mut fixed = Vec::new();
        let mut slot = Vec::new();
        let mut next = ncoef;
        for (y, l) in surgery.labels.iter().enumerate() {
            if surgery.is_normalized_label(y) {
                let p = surgery.spec.marked[l.mark.unwrap()];
                let (inf, x) = chart_of(&p);
                charts.push(inf);
                fixed.push(Some(x));
                slot.push(None);
            } else {
                let (inf, _) = chart_of(&guess.config_pre[y]);
                charts.push(inf);
                fixed.push(None);
                slot.push(Some(next));
                next += 1;
            }
        }
        let c = guess.map_r.flat();
        let n = c.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        Self {
            surgery,
            target,
            charts,
            fixed,
            slot,
            reference: c.iter().map(|x| x / n).collect(),
            ncoef,
        }
    }

    fn size(&self) -> usize {
        self.ncoef + self.slot.iter().filter(|s| s.is_some()).count()
    }

    fn initial(&self, guess: &PullbackState) -> DVector<C64> {
        let mut x = DVector::zeros(self.size());
        for (k, c) in self.reference.iter().enumerate() {
            x[k] = *c;
        }
        for (y, s) in self.slot.iter().enumerate() {
            if let Some(i) = s {
                let p = guess.config_pre[y];
                x[*i] = if self.charts[y] { p.v() / p.u() } else { p.u() / p.v() };
            }
        }
        x
    }

    fn coordinate(&self, x: &DVector<C64>, y: usize) -> C64 {
        match self.slot[y] {
            Some(i) => x[i],
            None => self.fixed[y].unwrap(),
        }
    }

    /// Residual vector and Jacobian.
    fn eval(&self, x: &DVector<C64>, want_jac: bool) -> (DVector<C64>, Option<DMatrix<C64>>) {
        let d = self.surgery.degree();
        let n = self.size();
        let mut f = DVector::zeros(n);
        let mut jac = if want_jac { Some(DMatrix::zeros(n, n)) } else { None };
        let mut row = 0;
        for (y, l) in self.surgery.labels.iter().enumerate() {
            let q = self.target[l.image];
            let (qu, qv) = (q.u(), q.v());
            let beta = self.coordinate(x, y);
            let inf = self.charts[y];
            for j in 0..l.multiplicity {
                let mut val = C64::new(0.0, 0.0);
                let mut dbeta = C64::new(0.0, 0.0);
                for k in 0..=d {
                    let e = if inf { d - k } else { k };
                    let fk = qv * x[k] - qu * x[d + 1 + k];
                    let basis = if e >= j {
                        binomial(e, j) * beta.powu((e - j) as u32)
                    } else {
                        C64::new(0.0, 0.0)
                    };
                    val += fk * basis;
                    if e > j {
                        dbeta += fk * binomial(e, j + 1) * (j + 1) as f64 * beta.powu((e - j - 1) as u32);
                    }
                    if let Some(m) = jac.as_mut() {
                        m[(row, k)] = qv * basis;
                        m[(row, d + 1 + k)] = -qu * basis;
                    }
                }
                f[row] = val;
                if let (Some(m), Some(i)) = (jac.as_mut(), self.slot[y]) {
                    m[(row, i)] = dbeta;
                }
                row += 1;
            }
        }
        let mut norm = C64::new(-1.0, 0.0);
        for k in 0..self.ncoef {
            norm += self.reference[k].conj() * x[k];
            if let Some(m) = jac.as_mut() {
                m[(row, k)] = self.reference[k].conj();
            }
        }
        f[row] = norm;
        (f, jac)
    }
}

fn sup(v: &DVector<C64>) -> f64 {
    v.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

/// Largest `chordal(R(b_y), target(image y))`.
pub fn commutation_residual(surgery: &Surgery, r: &RationalMap, pre: &[SpherePoint], target: &[SpherePoint]) -> f64 {
    surgery
        .labels
        .iter()
        .zip(pre)
        .map(|(l, b)| r.evaluate(b).chordal(&target[l.image]))
        .fold(0.0, f64::max)
}

/// One pullback step: finds `R` and the preimage marks over `target`,
/// starting Newton from `guess`.
pub fn solve_pullback_system(
    surgery: &Surgery,
    target: &[SpherePoint],
    guess: &PullbackState,
    opts: &SolverOptions,
) -> Result<PullbackState, PullbackError> {
    for &i in &surgery.spec.normalization {
        if target[i] != surgery.spec.marked[i] {
            return Err(PullbackError::NormalizationBroken(i));
        }
    }
    for i in 0..target.len() {
        for j in i + 1..target.len() {
            let dist = target[i].chordal(&target[j]);
            if dist < opts.collision {
                return Err(PullbackError::ConfigurationCollision(i, j, dist));
            }
        }
    }
    let sys = System::new(surgery, target, guess);
    let mut x = sys.initial(guess);
    let (mut f, _) = sys.eval(&x, false);
    let mut res = sup(&f);
    for _ in 0..opts.max_iter {
        if res < 1e-14 {
            break;
        }
        let (_, jac) = sys.eval(&x, true);
        let Some(dx) = jac.unwrap().lu().solve(&(-&f)) else {
            return Err(PullbackError::NewtonDiverged(res));
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial = &x + &dx * C64::new(alpha, 0.0);
            let (ft, _) = sys.eval(&trial, false);
            let rt = sup(&ft);
            if rt.is_finite() && rt < res {
                x = trial;
                f = ft;
                res = rt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !(res < opts.tol) {
        return Err(PullbackError::NewtonDiverged(res));
    }
    let coeffs: Vec<C64> = (0..sys.ncoef).map(|k| x[k]).collect();
    let map_r = RationalMap::from_flat(&coeffs).map_err(|_| PullbackError::NewtonDiverged(res))?;
    let config_pre: Vec<SpherePoint> = (0..surgery.labels.len())
        .map(|y| match sys.slot[y] {
            Some(i) => from_chart(sys.charts[y], x[i]),
            None => surgery.spec.marked[surgery.labels[y].mark.unwrap()],
        })
        .collect();
    for i in 0..config_pre.len() {
        for j in i + 1..config_pre.len() {
            let dist = config_pre[i].chordal(&config_pre[j]);
            if dist < opts.collision {
                return Err(PullbackError::ConfigurationCollision(i, j, dist));
            }
        }
    }
    let comm = commutation_residual(surgery, &map_r, &config_pre, target);
    Ok(PullbackState {
        t: guess.t,
        config_p: target.to_vec(),
        config_pre,
        map_r,
        newton_residual: res.max(comm),
    })
}

/// The state of `Q` itself over the pre-push marks.
pub fn initial_state(surgery: &Surgery) -> PullbackState {
    PullbackState {
        t: 0.0,
        config_p: surgery.pre_push.clone(),
        config_pre: surgery.labels.iter().map(|l| l.position).collect(),
        map_r: surgery.spec.q.clone(),
        newton_residual: 0.0,
    }
}

fn max_move(a: &PullbackState, b: &PullbackState) -> f64 {
    a.config_pre
        .iter()
        .zip(&b.config_pre)
        .map(|(x, y)| x.chordal(y))
        .fold(0.0, f64::max)
}

/// Adaptive continuation of the solution over `t ∈ [t0, t1]` along a target
/// path, starting from a state solving the system at `t0`.
fn continue_along(
    surgery: &Surgery,
    start: &PullbackState,
    t1: f64,
    first_step: f64,
    target: &dyn Fn(f64) -> Vec<SpherePoint>,
    opts: &ContinuationOptions,
) -> Result<(Vec<PullbackState>, Vec<f64>), PullbackError> {
    let mut states = Vec::new();
    let mut steps = Vec::new();
    let mut cur = start.clone();
    let mut h = first_step;
    let mut streak = 0;
    while cur.t < t1 - 1e-14 {
        let h_try = h.min(t1 - cur.t);
        let t_next = if t1 - (cur.t + h_try) < 1e-12 { t1 } else { cur.t + h_try };
        let tgt = target(t_next);
        let attempt = solve_pullback_system(surgery, &tgt, &cur, &opts.solver).and_then(|s| {
            if max_move(&cur, &s) > opts.max_move {
                Err(PullbackError::NewtonDiverged(s.newton_residual))
            } else {
                Ok(s)
            }
        });
        match attempt {
            Ok(mut s) => {
                s.t = t_next;
                steps.push(t_next - cur.t);
                states.push(s.clone());
                cur = s;
                streak += 1;
                if streak >= 3 {
                    h = (h * 2.0).min(first_step);
                    streak = 0;
                }
            }
            Err(PullbackError::ConfigurationCollision(a, b, dist)) if h_try <= opts.min_step => {
                return Err(PullbackError::ConfigurationCollision(a, b, dist));
            }
            Err(_) => {
                h = h_try * 0.5;
                streak = 0;
                if h < opts.min_step {
                    return Err(PullbackError::ContinuationStuck { t: cur.t, step: h });
                }
            }
        }
    }
    Ok((states, steps))
}

/// Continuation from `Q` (t = 0) to the first pullback of the pushed
/// configuration (t = 1).
pub fn run_isotopy_stage(
    surgery: &Surgery,
    opts: &ContinuationOptions,
) -> Result<ContinuationTrace, PullbackError> {
    let s0 = solve_pullback_system(surgery, &surgery.pre_push, &initial_state(surgery), &opts.solver)?;
    let target = |t: f64| surgery.push_targets(t);
    let (states, steps) = continue_along(surgery, &s0, 1.0, 1.0 / opts.steps as f64, &target, opts)?;
    let mut trace = ContinuationTrace {
        states: vec![s0],
        step_sizes: vec![0.0],
        stages: vec![Stage::Isotopy],
    };
    for (s, h) in states.into_iter().zip(steps) {
        trace.states.push(s);
        trace.step_sizes.push(h);
        trace.stages.push(Stage::Isotopy);
    }
    Ok(trace)
}

/// Outcome of the integer pullback iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThurstonRun {
    pub trace: ContinuationTrace,
    /// Indices into `trace.states` of the states at integer `t`.
    pub integer_states: Vec<usize>,
    /// Sup chordal distance between consecutive integer configurations.
    pub config_distances: Vec<f64>,
    pub coefficient_distances: Vec<f64>,
    pub converged: bool,
}

impl ThurstonRun {
    pub fn limit(&self) -> &PullbackState {
        &self.trace.states[*self.integer_states.last().unwrap()]
    }

    /// State at integer time `k`.
    pub fn at(&self, k: usize) -> &PullbackState {
        &self.trace.states[self.integer_states[k]]
    }

    /// Maps `R_0, R_1, …` at the integer times.
    pub fn maps(&self) -> Vec<RationalMap> {
        self.integer_states
            .iter()
            .map(|&i| self.trace.states[i].map_r.clone())
            .collect()
    }

    /// Ratios of consecutive configuration distances.
    pub fn decay_ratios(&self) -> Vec<f64> {
        self.config_distances
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

fn config_distance(a: &[SpherePoint], b: &[SpherePoint]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.chordal(y)).fold(0.0, f64::max)
}

/// Interpolated marks `config_pre|P` of the trace states over `[t−1, t]`.
fn restricted_pre(surgery: &Surgery, states: &[PullbackState], t: f64) -> Vec<SpherePoint> {
    let i = states.partition_point(|s| s.t <= t).clamp(1, states.len() - 1);
    let (a, b) = (&states[i - 1], &states[i]);
    let f = if b.t > a.t { ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0) } else { 1.0 };
    (0..surgery.marks())
        .map(|j| {
            let y = surgery.mark_label(j);
            if surgery.spec.normalization.contains(&j) {
                return surgery.spec.marked[j];
            }
            let (pa, pb) = (a.config_pre[y], b.config_pre[y]);
            if f == 0.0 {
                pa
            } else if f == 1.0 {
                pb
            } else {
                SpherePoint::from_xyz(&slerp(&pa.to_xyz(), &pb.to_xyz(), f))
            }
        })
        .collect()
}

/// Integer pullback steps after the isotopy stage. Each step `[k, k+1]` is
/// itself a continuation whose target path is the previous step's preimage
/// marks, so the branch at every step is the one connected to `Q`.
///
/// Stops when configurations and coefficients both move less than `tol`,
/// unless `fixed_steps` forces a set number of steps.
pub fn run_thurston_stage(
    surgery: &Surgery,
    isotopy: ContinuationTrace,
    max_steps: usize,
    tol: f64,
    fixed_steps: Option<usize>,
    opts: &ContinuationOptions,
) -> Result<ThurstonRun, PullbackError> {
    let mut trace = isotopy;
    let mut region: Vec<PullbackState> = trace.states.clone();
    let mut integer_states = vec![0, trace.states.len() - 1];
    let mut config_distances = Vec::new();
    let mut coefficient_distances = Vec::new();
    let d0 = config_distance(&trace.states[0].config_p, &region.last().unwrap().config_p);
    config_distances.push(d0);
    coefficient_distances.push(projective_distance(
        &trace.states[0].map_r.flat(),
        &region.last().unwrap().map_r.flat(),
    ));
    let limit = fixed_steps.unwrap_or(max_steps);
    let mut converged = false;
    for k in 1..=limit {
        let start = region.last().unwrap().clone();
        let prev_region = region.clone();
        let offset = k as f64;
        // target at time k + s is the previous region's restricted marks at k − 1 + s
        let target = |t: f64| restricted_pre(surgery, &prev_region, t - 1.0);
        let first = prev_region
            .windows(2)
            .map(|w| w[1].t - w[0].t)
            .fold(f64::INFINITY, f64::min)
            .max(1.0 / opts.steps as f64);
        let (states, steps) = continue_along(surgery, &start, offset + 1.0, first, &target, opts)?;
        region = vec![start];
        for (s, h) in states.into_iter().zip(steps) {
            region.push(s.clone());
            trace.states.push(s);
            trace.step_sizes.push(h);
            trace.stages.push(Stage::Thurston);
        }
        let a = &trace.states[*integer_states.last().unwrap()];
        let b = region.last().unwrap();
        let dc = config_distance(&a.config_p, &b.config_p);
        let dr = projective_distance(&a.map_r.flat(), &b.map_r.flat());
        config_distances.push(dc);
        coefficient_distances.push(dr);
        integer_states.push(trace.states.len() - 1);
        if dc < tol && dr < tol {
            converged = true;
            if fixed_steps.is_none() {
                break;
            }
        }
    }
    if !converged && fixed_steps.is_none() {
        return Err(PullbackError::NotConverged {
            steps: max_steps,
            distances: config_distances,
        });
    }
    Ok(ThurstonRun {
        trace,
        integer_states,
        config_distances,
        coefficient_distances,
        converged,
    })
}

/// Limit positions of the preimage labels.
pub fn limit_preimage_map(run: &ThurstonRun) -> Vec<SpherePoint> {
    run.limit().config_pre.clone()
}

/// Sup over integer times of the distances between two runs' marked
/// configurations.
pub fn independence_probe(a: &ThurstonRun, b: &ThurstonRun, steps: usize) -> f64 {
    (0..=steps.min(a.integer_states.len() - 1).min(b.integer_states.len() - 1))
        .map(|k| {
            let (x, y) = (a.at(k), b.at(k));
            config_distance(&x.config_pre, &y.config_pre)
                .max(config_distance(&x.config_p, &y.config_p))
        })
        .fold(0.0, f64::max)
}

/// Homogeneous values `(N(u,v), D(u,v))` of the flat coefficients.
fn homogeneous_eval(c: &[C64], u: C64, v: C64) -> (C64, C64) {
    let d = c.len() / 2 - 1;
    let mut n = C64::new(0.0, 0.0);
    let mut m = C64::new(0.0, 0.0);
    for k in 0..=d {
        let mono = u.powu(k as u32) * v.powu((d - k) as u32);
        n += c[k] * mono;
        m += c[d + 1 + k] * mono;
    }
    (n, m)
}

/// Jacobian determinant of `(N, D)` in `(u, v)`; vanishes at critical points.
fn homogeneous_jacobian(c: &[C64], u: C64, v: C64) -> C64 {
    let d = c.len() / 2 - 1;
    let zero = C64::new(0.0, 0.0);
    let (mut nu, mut nv, mut du, mut dv) = (zero, zero, zero, zero);
    for k in 0..=d {
        let (a, b) = (k as u32, (d - k) as u32);
        let pu = if a > 0 { u.powu(a - 1) * v.powu(b) * a as f64 } else { zero };
        let pv = if b > 0 { u.powu(a) * v.powu(b - 1) * b as f64 } else { zero };
        nu += c[k] * pu;
        nv += c[k] * pv;
        du += c[d + 1 + k] * pu;
        dv += c[d + 1 + k] * pv;
    }
    nu * dv - nv * du
}

/// Newton refinement of a nearly critically finite map: the coefficients,
/// the free marks and the unmarked critical points are adjusted until each
/// mark maps to its successor, critical marks are critical, and unmarked
/// critical points land on their nearest mark. Normalization marks stay put.
pub fn polish_critically_finite(
    r: &RationalMap,
    marks: &[SpherePoint],
    successor: &[usize],
    local_degree: &[usize],
    fixed: &[usize],
) -> Result<(RationalMap, Vec<SpherePoint>), PullbackError> {
    let mut c = r.flat();
    let pin = (0..c.len()).max_by(|&a, &b| c[a].norm().total_cmp(&c[b].norm())).unwrap();
    let scale = c[pin];
    for x in c.iter_mut() {
        *x /= scale;
    }
    let free: Vec<usize> = (0..marks.len()).filter(|i| !fixed.contains(i)).collect();
    let unmarked: Vec<SpherePoint> = r
        .critical_points()?
        .into_iter()
        .filter(|(p, _)| !marks.iter().zip(local_degree).any(|(m, &k)| k > 1 && m.chordal(p) < 1e-6))
        .flat_map(|(p, m)| std::iter::repeat_n(p, m))
        .collect();
    let landing: Vec<usize> = unmarked
        .iter()
        .map(|p| {
            let w = r.evaluate(p);
            (0..marks.len()).min_by(|&a, &b| marks[a].chordal(&w).total_cmp(&marks[b].chordal(&w))).unwrap()
        })
        .collect();
    let mut points: Vec<SpherePoint> = marks.to_vec();
    let mut crit = unmarked.clone();
    let coeff_unknowns: Vec<usize> = (0..c.len()).filter(|&k| k != pin).collect();
    let n_unknowns = coeff_unknowns.len() + free.len() + crit.len();
    let zero = C64::new(0.0, 0.0);
    let mut last = f64::INFINITY;
    for _ in 0..30 {
        let charts: Vec<_> = points.iter().map(|p| p.centered_chart().inverse()).collect();
        let crit_charts: Vec<_> = crit.iter().map(|p| p.centered_chart().inverse()).collect();
        let residual = |x: &[C64]| -> Vec<C64> {
            let mut cc = c.clone();
            for (k, &idx) in coeff_unknowns.iter().enumerate() {
                cc[idx] += x[k];
            }
            let mut eta = vec![zero; points.len()];
            for (k, &i) in free.iter().enumerate() {
                eta[i] = x[coeff_unknowns.len() + k];
            }
            let raw = |m: &crate::sphere::MobiusMap, e: C64| (m.a * e + m.b, m.c * e + m.d);
            let pts: Vec<(C64, C64)> = (0..points.len()).map(|i| raw(&charts[i], eta[i])).collect();
            let mut out = Vec::with_capacity(n_unknowns);
            for i in 0..points.len() {
                let (n, m) = homogeneous_eval(&cc, pts[i].0, pts[i].1);
                let (tu, tv) = pts[successor[i]];
                out.push(n * tv - m * tu);
                if local_degree[i] > 1 {
                    out.push(homogeneous_jacobian(&cc, pts[i].0, pts[i].1));
                }
            }
            for (k, cm) in crit_charts.iter().enumerate() {
                let (u, v) = raw(cm, x[coeff_unknowns.len() + free.len() + k]);
                out.push(homogeneous_jacobian(&cc, u, v));
                let (n, m) = homogeneous_eval(&cc, u, v);
                let (tu, tv) = pts[landing[k]];
                out.push(n * tv - m * tu);
            }
            out
        };
        let x0 = vec![zero; n_unknowns];
        let f0 = residual(&x0);
        let norm = f0.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if norm < 1e-15 || norm >= last {
            break;
        }
        last = norm;
        let h = 1e-7;
        let mut jac = DMatrix::<C64>::zeros(f0.len(), n_unknowns);
        for k in 0..n_unknowns {
            let mut x = x0.clone();
            x[k] = C64::new(h, 0.0);
            let f = residual(&x);
            for (row, (a, b)) in f.iter().zip(&f0).enumerate() {
                jac[(row, k)] = (a - b) / h;
            }
        }
        let rhs = DVector::from_iterator(f0.len(), f0.iter().map(|z| -z));
        let step = jac
            .svd(true, true)
            .solve(&rhs, 1e-13)
            .map_err(|_| PullbackError::NewtonDiverged(norm))?;
        for (k, &idx) in coeff_unknowns.iter().enumerate() {
            c[idx] += step[k];
        }
        for (k, &i) in free.iter().enumerate() {
            points[i] = charts[i].apply(&SpherePoint::finite(step[coeff_unknowns.len() + k]));
        }
        for k in 0..crit.len() {
            crit[k] = crit_charts[k].apply(&SpherePoint::finite(step[coeff_unknowns.len() + free.len() + k]));
        }
    }
    Ok((RationalMap::from_flat_unchecked(&c), points))
}

/// Convenience: validated surgery through both stages.
pub fn run_pullback(
    surgery: &Surgery,
    max_steps: usize,
    tol: f64,
    fixed_steps: Option<usize>,
    opts: &ContinuationOptions,
) -> Result<ThurstonRun, PullbackError> {
    let iso = run_isotopy_stage(surgery, opts)?;
    run_thurston_stage(surgery, iso, max_steps, tol, fixed_steps, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surgery::instances;

    /// `a(z² − 1)/(z² + a)`, the capture family with free mark `a`.
    fn family(a: f64) -> RationalMap {
        RationalMap::from_real(&[-a, 0.0, a], &[a, 0.0, 1.0]).unwrap()
    }

    fn next_mark(a: f64) -> f64 {
        (2.0 * a / (a - 1.0)).sqrt()
    }

    #[test]
    fn trivial_is_fixed_point() {
        let s = instances::basilica_trivial().validate().unwrap();
        let g = initial_state(&s);
        let out = solve_pullback_system(&s, &s.pre_push, &g, &SolverOptions::default()).unwrap();
        assert!(out.newton_residual < 1e-12);
        assert!(projective_distance(&out.map_r.flat(), &g.map_r.flat()) < 1e-12);
        for (a, b) in out.config_pre.iter().zip(&g.config_pre) {
            assert!(a.chordal(b) < 1e-12);
        }
    }

    #[test]
    fn perturbed_target_converges_nearby() {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let run = run_isotopy_stage(&s, &ContinuationOptions::default()).unwrap();
        let last = run.states.last().unwrap();
        let mut target = last.config_p.clone();
        let w = target[0].affine().unwrap();
        target[0] = SpherePoint::finite(w + C64::new(1e-3, 0.0));
        let out = solve_pullback_system(&s, &target, last, &SolverOptions::default()).unwrap();
        assert!(out.newton_residual < 1e-11);
        assert!(max_move(&out, last) < 1e-2);
    }

    #[test]
    fn colliding_marks_rejected() {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let g = initial_state(&s);
        let mut target = s.pre_push.clone();
        target[0] = target[1];
        let err = solve_pullback_system(&s, &target, &g, &SolverOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            PullbackError::ConfigurationCollision(..) | PullbackError::NewtonDiverged(_)
        ));
    }

    #[test]
    fn isotopy_stage_follows_family() {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let trace = run_isotopy_stage(&s, &ContinuationOptions::default()).unwrap();
        assert!(trace.states.windows(2).all(|w| w[1].t > w[0].t));
        assert!(trace.states.iter().all(|st| st.newton_residual < 1e-10));
        let last = trace.states.last().unwrap();
        assert_eq!(last.t, 1.0);
        assert!(last.map_r.approx_eq_projective(&family(2.0_f64.sqrt()), 1e-10));
        let a1 = next_mark(2.0_f64.sqrt());
        let y = s.mark_label(0);
        assert!(last.config_pre[y].chordal(&SpherePoint::real(a1)) < 1e-10);
    }

    #[test]
    fn trivial_run_stays_at_q() {
        let s = instances::basilica_trivial().validate().unwrap();
        let run = run_pullback(&s, 60, 1e-9, Some(20), &ContinuationOptions::default()).unwrap();
        assert_eq!(run.integer_states.len(), 22);
        for r in run.maps() {
            assert!(projective_distance(&r.flat(), &s.spec.q.flat()) < 1e-10);
        }
        let stop = run_pullback(&s, 60, 1e-9, None, &ContinuationOptions::default()).unwrap();
        assert!(stop.converged);
        assert_eq!(stop.integer_states.len(), 3);
    }

    #[test]
    fn capture_run_matches_closed_form() {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let run = run_pullback(&s, 60, 1e-9, None, &ContinuationOptions::default()).unwrap();
        assert!(run.converged);
        let mut a = 2.0_f64.sqrt();
        for k in 1..run.integer_states.len().min(12) {
            assert!(run.at(k).map_r.approx_eq_projective(&family(a), 1e-9), "step {k}");
            assert!(run.at(k).config_p[0].chordal(&SpherePoint::real(a)) < 1e-9);
            a = next_mark(a);
        }
        assert!(run.limit().map_r.approx_eq_projective(&family(2.0), 1e-8));
        // contraction by the derivative −1/2 of the mark recursion
        let ratios = run.decay_ratios();
        let tail = &ratios[4..12];
        assert!(tail.iter().all(|r| (r - 0.5).abs() < 0.1), "{ratios:?}");
    }

    #[test]
    fn limit_map_commutes_with_marks() {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let run = run_pullback(&s, 60, 1e-9, None, &ContinuationOptions::default()).unwrap();
        let iota = limit_preimage_map(&run);
        let lim = run.limit();
        assert!(commutation_residual(&s, &lim.map_r, &iota, &lim.config_p) < 1e-9);
    }

    #[test]
    fn identical_runs_probe_zero() {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let a = run_pullback(&s, 60, 1e-9, Some(5), &ContinuationOptions::default()).unwrap();
        assert_eq!(independence_probe(&a, &a, 5), 0.0);
    }
}
