//! Point-push surgery data `f̂ = σ ∘ Q` and the backward orbit of the push
//! paths under `Q`.

use crate::rational::{MarkedPortrait, RationalError, RationalMap};
use crate::sphere::{PointPushIsotopy, SphereError, SpherePath, SpherePoint};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for matching composed images against declared marked points.
pub const PORTRAIT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurgeryError {
    #[error("tube hits protected point: {0}")]
    TubeHitsProtected(String),
    #[error("portrait inconsistent: {0}")]
    PortraitInconsistent(String),
    #[error("normalization point in tube: {0}")]
    NormalizationInTube(String),
    #[error("need at least three marked points, got {0}")]
    TooFewMarks(usize),
    #[error("branch collision: {0}")]
    BranchCollision(String),
    #[error(transparent)]
    Sphere(#[from] SphereError),
    #[error(transparent)]
    Rational(#[from] RationalError),
}

/// Surgery input: the map, the marked set of `f̂` with its portrait, three
/// normalization indices and the push.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgerySpec {
    pub q: RationalMap,
    pub marked: Vec<SpherePoint>,
    pub successor: Vec<usize>,
    pub local_degree: Vec<usize>,
    pub normalization: [usize; 3],
    pub push: PointPushIsotopy,
}

/// One point of `f̂⁻¹(P)`, counted once with its local degree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreimageLabel {
    /// Index in `P` of the image `f̂(y)`.
    pub image: usize,
    pub multiplicity: usize,
    /// Index in `P` when the label is itself a marked point.
    pub mark: Option<usize>,
    /// Position among the `Q`-preimages before any pullback.
    pub position: SpherePoint,
}

/// A spec whose invariants have been checked, with derived data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surgery {
    pub spec: SurgerySpec,
    /// `σ⁻¹(p)` for each marked point: where `Q` sees the marks.
    pub pre_push: Vec<SpherePoint>,
    /// Indices of `P′ = f̂(P)`.
    pub image_marks: Vec<usize>,
    pub labels: Vec<PreimageLabel>,
}

impl SurgerySpec {
    pub fn portrait(&self) -> MarkedPortrait {
        MarkedPortrait {
            points: self.marked.clone(),
            successor: self.successor.clone(),
            local_degree: self.local_degree.clone(),
        }
    }

    pub fn paths(&self) -> Vec<SpherePath> {
        self.push.active_pushes().map(|p| p.path.clone()).collect()
    }

    pub fn validate(&self) -> Result<Surgery, SurgeryError> {
        let n = self.marked.len();
        if n < 3 {
            return Err(SurgeryError::TooFewMarks(n));
        }
        if self.successor.len() != n || self.local_degree.len() != n {
            return Err(SurgeryError::PortraitInconsistent(
                "successor and local_degree must list every marked point".into(),
            ));
        }
        if let Some(&j) = self.successor.iter().find(|&&j| j >= n) {
            return Err(SurgeryError::PortraitInconsistent(format!("successor index {j} out of range")));
        }
        let [a, b, c] = self.normalization;
        if a.max(b).max(c) >= n || a == b || b == c || a == c {
            return Err(SurgeryError::PortraitInconsistent(format!(
                "normalization indices {:?} must be three distinct marks",
                self.normalization
            )));
        }
        for i in 0..n {
            for j in i + 1..n {
                if self.marked[i].chordal(&self.marked[j]) < PORTRAIT_TOLERANCE {
                    return Err(SurgeryError::PortraitInconsistent(format!(
                        "marks {i} and {j} coincide"
                    )));
                }
            }
        }
        let d = self.q.degree();
        let crit_sum: usize = self.local_degree.iter().map(|k| k.saturating_sub(1)).sum();
        if self.local_degree.contains(&0) || crit_sum > 2 * d - 2 {
            return Err(SurgeryError::PortraitInconsistent("local degrees out of range".into()));
        }

        // tubes
        for p in self.push.active_pushes() {
            if p.mark >= n {
                return Err(SurgeryError::PortraitInconsistent(format!("push names unknown mark {}", p.mark)));
            }
            if p.path.end().chordal(&self.marked[p.mark]) > PORTRAIT_TOLERANCE {
                return Err(SurgeryError::PortraitInconsistent(format!(
                    "path for mark {} ends at {} instead of {}",
                    p.mark,
                    p.path.end(),
                    self.marked[p.mark]
                )));
            }
        }
        for &i in &self.normalization {
            if self.push.in_tube(&self.marked[i]) {
                return Err(SurgeryError::NormalizationInTube(format!(
                    "normalization mark {i} at {}",
                    self.marked[i]
                )));
            }
        }
        let mut image_marks: Vec<usize> = self.successor.clone();
        image_marks.sort();
        image_marks.dedup();
        self.push.check_tubes(&[]).map_err(|e| SurgeryError::TubeHitsProtected(e.to_string()))?;
        for &i in &image_marks {
            for p in self.push.active_pushes() {
                let dist = p.path.distance_to(&self.marked[i]);
                if dist < 1.1 * self.push.tube_radius {
                    return Err(SurgeryError::TubeHitsProtected(format!(
                        "path of mark {} passes {dist:.3e} from image mark {i} at {}",
                        p.mark, self.marked[i]
                    )));
                }
            }
        }

        // composed dynamics
        let sigma = |p: &SpherePoint| self.push.flow(p, 0.0, 1.0);
        for i in 0..n {
            let img = sigma(&self.q.evaluate(&self.marked[i]))?;
            let want = self.marked[self.successor[i]];
            if img.chordal(&want) > PORTRAIT_TOLERANCE {
                return Err(SurgeryError::PortraitInconsistent(format!(
                    "mark {i} maps to {img}, declared successor {} is at {want}",
                    self.successor[i]
                )));
            }
            let nu = self.q.local_degree(&self.marked[i])?;
            if nu != self.local_degree[i] {
                return Err(SurgeryError::PortraitInconsistent(format!(
                    "mark {i} has local degree {nu}, declared {}",
                    self.local_degree[i]
                )));
            }
        }
        for (cp, _) in self.q.critical_points()? {
            let v = sigma(&self.q.evaluate(&cp))?;
            if !self.marked.iter().any(|p| p.chordal(&v) < PORTRAIT_TOLERANCE) {
                return Err(SurgeryError::PortraitInconsistent(format!(
                    "critical point {cp} has unmarked critical value {v}"
                )));
            }
        }

        // a pushed mark starts exactly at its path's start
        let pre_push: Vec<SpherePoint> = (0..n)
            .map(|i| match self.push.active_pushes().find(|p| p.mark == i) {
                Some(p) => Ok(p.path.start()),
                None => self.push.flow(&self.marked[i], 1.0, 0.0),
            })
            .collect::<Result<_, _>>()?;
        let mut labels = Vec::new();
        for (i, q) in pre_push.iter().enumerate() {
            for (pos, m) in self.q.preimages(q)? {
                let mark = self
                    .marked
                    .iter()
                    .position(|p| p.chordal(&pos) < PORTRAIT_TOLERANCE);
                labels.push(PreimageLabel {
                    image: i,
                    multiplicity: m,
                    mark,
                    position: pos,
                });
            }
        }
        for j in 0..n {
            let l = labels.iter().find(|l| l.mark == Some(j)).ok_or_else(|| {
                SurgeryError::PortraitInconsistent(format!("mark {j} is not a preimage of a mark"))
            })?;
            if l.multiplicity != self.local_degree[j] {
                return Err(SurgeryError::PortraitInconsistent(format!(
                    "mark {j} is a preimage of multiplicity {}",
                    l.multiplicity
                )));
            }
        }
        Ok(Surgery {
            spec: self.clone(),
            pre_push,
            image_marks,
            labels,
        })
    }
}

impl Surgery {
    pub fn degree(&self) -> usize {
        self.spec.q.degree()
    }

    pub fn marks(&self) -> usize {
        self.spec.marked.len()
    }

    /// Positions of the marks at push time `t`: a pushed mark sits on its
    /// path (where the flow carries it), the others stay.
    pub fn push_targets(&self, t: f64) -> Vec<SpherePoint> {
        (0..self.marks())
            .map(|i| match self.spec.push.active_pushes().find(|p| p.mark == i) {
                Some(p) => p.path.point_at(t),
                None => self.spec.marked[i],
            })
            .collect()
    }

    /// Label representing mark `j` as a preimage point.
    pub fn mark_label(&self, j: usize) -> usize {
        self.labels.iter().position(|l| l.mark == Some(j)).unwrap()
    }

    pub fn is_normalized_label(&self, y: usize) -> bool {
        matches!(self.labels[y].mark, Some(j) if self.spec.normalization.contains(&j))
    }

    /// Marked points outside `P₀`.
    pub fn free_marks(&self) -> Vec<usize> {
        (0..self.marks())
            .filter(|i| !self.spec.normalization.contains(i))
            .collect()
    }
}

/// One lifted curve: samples `(s, point)` with `s` the parameter it shares
/// with its generation-0 ancestor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub parent: Option<usize>,
    pub samples: Vec<(f64, SpherePoint)>,
}

impl Curve {
    pub fn points(&self) -> impl Iterator<Item = &SpherePoint> {
        self.samples.iter().map(|(_, p)| p)
    }

    /// Chordal distance from `p` to the polyline through the samples.
    pub fn distance_to(&self, p: &SpherePoint) -> f64 {
        let x = p.to_xyz();
        if self.samples.len() == 1 {
            return self.samples[0].1.chordal(p);
        }
        self.samples
            .windows(2)
            .map(|w| crate::sphere::arc_distance(&x, &w[0].1.to_xyz(), &w[1].1.to_xyz()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest chordal gap between consecutive samples.
    pub fn max_gap(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| w[0].1.chordal(&w[1].1))
            .fold(0.0, f64::max)
    }
}

/// Truncated backward orbit `Z₀, Q⁻¹(Z₀), …, Q⁻ⁿ(Z₀)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveFamily {
    pub generations: Vec<Vec<Curve>>,
    pub tube_radius: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftOptions {
    /// Chordal spacing of generation-0 samples and the cap on lifted gaps.
    pub spacing: f64,
    /// Distance to a critical value under which the lift snaps to the
    /// critical point.
    pub snap: f64,
    pub max_subdivisions: usize,
    pub tube_radius: f64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self {
            spacing: 0.02,
            snap: 0.0,
            max_subdivisions: 200,
            tube_radius: 0.1,
        }
    }
}

impl CurveFamily {
    pub fn depth(&self) -> usize {
        self.generations.len() - 1
    }

    /// Chordal distance from `p` to the union of generations `1..=n`.
    pub fn distance_to(&self, p: &SpherePoint, n: usize) -> f64 {
        self.generations
            .iter()
            .take(n + 1)
            .skip(1)
            .flatten()
            .map(|c| c.distance_to(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest `chordal(Q(v), parent curve)` over all lifted vertices.
    pub fn forward_residual(&self, q: &RationalMap) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 1..self.generations.len() {
            for c in &self.generations[k] {
                let parent = &self.generations[k - 1][c.parent.unwrap()];
                for (_, v) in &c.samples {
                    worst = worst.max(parent.distance_to(&q.evaluate(v)));
                }
            }
        }
        worst
    }

    /// Number of curve endpoints in generation `k` (two per nontrivial curve,
    /// one per point curve).
    pub fn endpoint_count(&self, k: usize) -> usize {
        self.generations[k]
            .iter()
            .map(|c| if c.samples.len() > 1 { 2 } else { 1 })
            .sum()
    }
}

/// Exact generation-0 point at parameter `s`.
fn base_point(paths: &[SpherePath], idx: usize, s: f64) -> SpherePoint {
    paths[idx].point_at(s)
}

struct Lifter<'a> {
    q: &'a RationalMap,
    crit: Vec<(SpherePoint, SpherePoint)>,
    opts: LiftOptions,
}

impl<'a> Lifter<'a> {
    /// Preimage of `target` continuing from `prev`, with its ambiguity
    /// margin (distance to runner-up over distance to chosen).
    fn follow(&self, prev: &SpherePoint, target: &SpherePoint) -> Result<(SpherePoint, f64), SurgeryError> {
        if let Some((cp, _)) = self
            .crit
            .iter()
            .find(|(_, cv)| cv.chordal(target) <= self.opts.snap)
        {
            if cp.chordal(prev) < 0.5 {
                return Ok((*cp, f64::INFINITY));
            }
        }
        let pre = self.q.fiber_roots(target)?;
        let mut ds: Vec<(f64, SpherePoint)> = pre.iter().map(|p| (p.chordal(prev), *p)).collect();
        ds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let pick = ds[0].1;
        let margin = match ds.iter().find(|(_, p)| p.chordal(&pick) > 0.0) {
            Some((d, _)) => d / ds[0].0.max(1e-300),
            None => f64::INFINITY,
        };
        Ok((ds[0].1, margin))
    }

    /// Lifts a parent sample list starting at index `i0` from `start`.
    fn lift(
        &self,
        parent: &dyn Fn(f64) -> SpherePoint,
        samples: &[(f64, SpherePoint)],
        i0: usize,
        start: SpherePoint,
    ) -> Result<Vec<(f64, SpherePoint)>, SurgeryError> {
        let mut fwd = vec![(samples[i0].0, start)];
        self.walk(parent, samples[i0..].iter().map(|x| x.0).collect(), &mut fwd)?;
        let mut bwd = vec![(samples[i0].0, start)];
        self.walk(parent, samples[..=i0].iter().rev().map(|x| x.0).collect(), &mut bwd)?;
        bwd.reverse();
        bwd.pop();
        bwd.extend(fwd);
        Ok(bwd)
    }

    fn walk(
        &self,
        parent: &dyn Fn(f64) -> SpherePoint,
        params: Vec<f64>,
        out: &mut Vec<(f64, SpherePoint)>,
    ) -> Result<(), SurgeryError> {
        for w in params.windows(2) {
            let mut stack = vec![(w[0], w[1], 0usize)];
            while let Some((s0, s1, depth)) = stack.pop() {
                let prev = out.last().unwrap().1;
                let target = parent(s1);
                let (z, margin) = self.follow(&prev, &target)?;
                let disp = z.chordal(&prev);
                let ambiguous = margin < 3.0;
                let long = disp > self.opts.spacing;
                if (ambiguous || long) && depth < self.opts.max_subdivisions {
                    let mid = 0.5 * (s0 + s1);
                    stack.push((mid, s1, depth + 1));
                    stack.push((s0, mid, depth + 1));
                    continue;
                }
                if ambiguous && margin < 1.5 {
                    return Err(SurgeryError::BranchCollision(format!(
                        "branches within factor {margin:.3} near {z} at subdivision limit (from {prev}, s {s0:e}..{s1:e}, parent {} -> {target})", parent(s0)
                    )));
                }
                out.push((s1, z));
            }
        }
        Ok(())
    }
}

/// Lifts the paths through every inverse branch of `q`, `n` times.
pub fn pullback_curves(
    q: &RationalMap,
    paths: &[SpherePath],
    n: usize,
    opts: LiftOptions,
) -> Result<CurveFamily, SurgeryError> {
    let d = q.degree();
    let crit: Vec<(SpherePoint, SpherePoint)> = q
        .critical_points()?
        .into_iter()
        .map(|(c, _)| (c, q.evaluate(&c)))
        .collect();
    let lifter = Lifter { q, crit, opts };
    let gen0: Vec<Curve> = paths
        .iter()
        .map(|p| {
            if p.is_trivial() {
                return Curve { parent: None, samples: vec![(0.0, p.start())] };
            }
            let k = ((p.length() / opts.spacing).ceil() as usize).max(1);
            Curve {
                parent: None,
                samples: (0..=k)
                    .map(|j| {
                        let s = j as f64 / k as f64;
                        (s, p.point_at(s))
                    })
                    .collect(),
            }
        })
        .collect();
    let mut ancestors: Vec<Vec<usize>> = vec![(0..gen0.len()).collect()];
    let mut generations = vec![gen0];
    for k in 1..=n {
        let prev = &generations[k - 1];
        let anc = &ancestors[k - 1];
        let lifted: Vec<Vec<(Curve, usize)>> = prev
            .par_iter()
            .enumerate()
            .map(|(pi, parent)| -> Result<Vec<(Curve, usize)>, SurgeryError> {
                let root = anc[pi];
                let exact = |s: f64| exact_point(q, &generations, &ancestors, paths, k - 1, pi, s, &lifter);
                // start away from critical values
                let i0 = (0..parent.samples.len())
                    .max_by(|&a, &b| {
                        let da = lifter.crit.iter().map(|(_, v)| v.chordal(&parent.samples[a].1)).fold(f64::INFINITY, f64::min);
                        let db = lifter.crit.iter().map(|(_, v)| v.chordal(&parent.samples[b].1)).fold(f64::INFINITY, f64::min);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                let mut starts: Vec<SpherePoint> = Vec::new();
                for (p, m) in q.preimages(&parent.samples[i0].1)? {
                    starts.extend(std::iter::repeat_n(p, m));
                }
                starts.sort_by(|a, b| {
                    let (x, y) = (a.to_xyz(), b.to_xyz());
                    x.partial_cmp(&y).unwrap()
                });
                let mut out = Vec::with_capacity(d);
                for z in starts {
                    let samples = if parent.samples.len() == 1 {
                        vec![(parent.samples[0].0, z)]
                    } else {
                        lifter.lift(&exact, &parent.samples, i0, z)?
                    };
                    out.push((Curve { parent: Some(pi), samples }, root));
                }
                Ok(out)
            })
            .collect::<Result<_, _>>()?;
        let mut gen = Vec::new();
        let mut anc_k = Vec::new();
        for group in lifted {
            for (c, r) in group {
                gen.push(c);
                anc_k.push(r);
            }
        }
        generations.push(gen);
        ancestors.push(anc_k);
    }
    let tube_radius = (0..=n)
        .map(|k| opts.tube_radius / (d as f64).powi(k as i32))
        .collect();
    Ok(CurveFamily { generations, tube_radius })
}

/// Point of curve `idx` in generation `k` at parameter `s`, obtained by
/// lifting the exact generation-0 point along the chain of parents.
#[allow(clippy::too_many_arguments)]
fn exact_point(
    q: &RationalMap,
    generations: &[Vec<Curve>],
    ancestors: &[Vec<usize>],
    paths: &[SpherePath],
    k: usize,
    idx: usize,
    s: f64,
    lifter: &Lifter,
) -> SpherePoint {
    if k == 0 {
        let root = ancestors[0][idx];
        return base_point(paths, root, s);
    }
    let curve = &generations[k][idx];
    let parent_pt = exact_point(q, generations, ancestors, paths, k - 1, curve.parent.unwrap(), s, lifter);
    let guess = interpolate(&curve.samples, s, &lifter.crit);
    lifter
        .follow(&guess, &parent_pt)
        .map(|x| x.0)
        .unwrap_or(guess)
}

/// Piecewise-geodesic interpolation of samples at parameter `s`, except
/// that a segment ending at a critical point yields its other end (lifts
/// leave critical points faster than any fixed power of `s`).
fn interpolate(samples: &[(f64, SpherePoint)], s: f64, crit: &[(SpherePoint, SpherePoint)]) -> SpherePoint {
    if samples.len() == 1 {
        return samples[0].1;
    }
    let i = samples
        .windows(2)
        .position(|w| (w[0].0 - s) * (w[1].0 - s) <= 0.0)
        .unwrap_or(0);
    let (s0, p0) = samples[i];
    let (s1, p1) = samples[i + 1];
    let critical = |p: &SpherePoint| crit.iter().any(|(c, _)| c.chordal(p) < 1e-12);
    match (critical(&p0), critical(&p1)) {
        (true, false) => return p1,
        (false, true) => return p0,
        _ => {}
    }
    let f = if s1 != s0 { (s - s0) / (s1 - s0) } else { 0.0 };
    SpherePoint::from_xyz(&crate::sphere::slerp(&p0.to_xyz(), &p1.to_xyz(), f))
}

/// The two shipped surgeries on `z² − 1`.
pub mod instances {
    use super::*;
    use crate::sphere::{BumpProfile, Push};

    pub fn basilica_map() -> RationalMap {
        RationalMap::from_real(&[-1.0, 0.0, 1.0], &[1.0]).unwrap()
    }

    /// No push: `f̂ = Q` with marks `{−1, 0, ∞}`.
    pub fn basilica_trivial() -> SurgerySpec {
        SurgerySpec {
            q: basilica_map(),
            marked: vec![SpherePoint::real(-1.0), SpherePoint::real(0.0), SpherePoint::infinity()],
            successor: vec![1, 0, 2],
            local_degree: vec![1, 2, 2],
            normalization: [0, 1, 2],
            push: PointPushIsotopy::identity(),
        }
    }

    /// Push of `∞` to `√2` along the real axis, capturing the critical value
    /// `∞` into the basin of `{0, −1}`.
    pub fn basilica_capture(r: f64) -> SurgerySpec {
        let w = SpherePoint::real(2.0_f64.sqrt());
        SurgerySpec {
            q: basilica_map(),
            marked: vec![w, SpherePoint::real(1.0), SpherePoint::real(0.0), SpherePoint::real(-1.0)],
            successor: vec![1, 2, 3, 2],
            local_degree: vec![1, 1, 2, 1],
            normalization: [1, 2, 3],
            push: PointPushIsotopy {
                pushes: vec![Push {
                    mark: 0,
                    path: SpherePath::new(vec![SpherePoint::infinity(), w]).unwrap(),
                }],
                tube_radius: r,
                bump: BumpProfile::Smoothstep,
            },
        }
    }
}
