//! The partial semiconjugacies `Φ_n` with `R_{n−1} ∘ Φ_n = Φ_{n−1} ∘ Q` on
//! grid meshes avoiding the pulled-back curves.

use crate::metric::ExpandingMetric;
use crate::rational::{RationalError, RationalMap};
use crate::sphere::SpherePoint;
use crate::surgery::{CurveFamily, Surgery};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemiconjError {
    #[error("exclusion leaves no mesh samples")]
    EmptyMesh,
    #[error("curves computed to depth {have}, level {want} requested")]
    CurvesTooShallow { have: usize, want: usize },
    #[error("branch ambiguity on edge {a}–{b} (margin {margin:.3})")]
    BranchAmbiguity { a: SpherePoint, b: SpherePoint, margin: f64 },
    #[error("no compatible samples between the meshes")]
    MeshMismatch,
    #[error("only {have} maps for level {want}")]
    TooFewMaps { have: usize, want: usize },
    #[error(transparent)]
    Rational(#[from] RationalError),
}

/// Largest near-tie ratio accepted when choosing a branch across an edge.
pub const MARGIN_LIMIT: f64 = 0.5;

/// Chordal radius of the local charts at anchor points.
const ANCHOR_RADIUS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pt {
    Global(SpherePoint),
    /// Coordinate in the centered chart of an anchor.
    Local(usize, SpherePoint),
}

fn origin_distance(z: &SpherePoint) -> f64 {
    z.chordal(&SpherePoint::real(0.0))
}

/// `post ∘ R ∘ pre` forced to send 0 to 0.
fn pinned(r: &RationalMap, from: &SpherePoint, to: &SpherePoint) -> RationalMap {
    let mut c = r.transform(&to.centered_chart(), &from.centered_chart().inverse()).flat();
    c[0] = C64::new(0.0, 0.0);
    RationalMap::from_flat_unchecked(&c)
}

/// `Q` and the maps `R_0, R_1, …` with their inverse branches. Points near
/// anchors (normalization points whose images are normalization points
/// under every map) are carried in local charts, so orbits falling into a
/// superattracting cycle keep relative precision.
#[derive(Clone, Debug)]
pub struct Tower {
    pub q: RationalMap,
    pub maps: Vec<RationalMap>,
    pub anchors: Vec<SpherePoint>,
    critical: Vec<SpherePoint>,
    succ: Vec<usize>,
    q_local: Vec<RationalMap>,
    r_local: Vec<Vec<RationalMap>>,
}

impl Tower {
    pub fn new(q: &RationalMap, maps: &[RationalMap], fixed: &[SpherePoint]) -> Self {
        let mut anchors = Vec::new();
        let mut succ = Vec::new();
        for a in fixed {
            let img = q.evaluate(a);
            let Some(b) = fixed.iter().position(|p| p.chordal(&img) < 1e-12) else { continue };
            if maps.iter().all(|r| r.evaluate(a).chordal(&fixed[b]) < 1e-9) {
                anchors.push(*a);
                succ.push(b);
            }
        }
        // re-index successors into the anchor list, dropping anchors whose
        // image is not an anchor
        loop {
            let keep: Vec<bool> = succ.iter().map(|&b| anchors.iter().any(|a| a.chordal(&fixed[b]) < 1e-12)).collect();
            if keep.iter().all(|&k| k) {
                break;
            }
            let (a2, s2): (Vec<_>, Vec<_>) = anchors.iter().zip(&succ).zip(&keep).filter(|(_, &k)| k).map(|((a, s), _)| (*a, *s)).unzip();
            anchors = a2;
            succ = s2;
        }
        let succ: Vec<usize> = succ
            .iter()
            .map(|&b| anchors.iter().position(|a| a.chordal(&fixed[b]) < 1e-12).unwrap())
            .collect();
        let q_local = (0..anchors.len()).map(|i| pinned(q, &anchors[i], &anchors[succ[i]])).collect();
        let r_local = maps
            .iter()
            .map(|r| (0..anchors.len()).map(|i| pinned(r, &anchors[i], &anchors[succ[i]])).collect())
            .collect();
        let critical = q
            .critical_points()
            .map(|c| c.into_iter().map(|(c, _)| c).filter(|c| anchors.iter().all(|a| a.chordal(c) > 1e-12)).collect())
            .unwrap_or_default();
        Self { q: q.clone(), maps: maps.to_vec(), anchors, critical, succ, q_local, r_local }
    }

    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    fn settle(&self, p: SpherePoint) -> Pt {
        for (i, a) in self.anchors.iter().enumerate() {
            if p.chordal(a) < ANCHOR_RADIUS {
                return Pt::Local(i, a.centered_chart().apply(&p));
            }
        }
        Pt::Global(p)
    }

    fn localize(&self, b: usize, y: SpherePoint) -> Pt {
        if origin_distance(&y) < ANCHOR_RADIUS {
            Pt::Local(b, y)
        } else {
            self.settle(self.anchors[b].centered_chart().inverse().apply(&y))
        }
    }

    fn global(&self, x: &Pt) -> SpherePoint {
        match *x {
            Pt::Global(p) => p,
            Pt::Local(a, z) => self.anchors[a].centered_chart().inverse().apply(&z),
        }
    }

    /// `R_level(x)`.
    fn apply(&self, level: usize, x: &Pt) -> Pt {
        match *x {
            Pt::Global(p) => self.settle(self.maps[level].evaluate(&p)),
            Pt::Local(a, z) => self.localize(self.succ[a], self.r_local[level][a].evaluate(&z)),
        }
    }

    fn distance(&self, x: &Pt, y: &Pt) -> f64 {
        match (x, y) {
            (Pt::Local(a, z), Pt::Local(b, w)) if a == b => z.chordal(w),
            _ => self.global(x).chordal(&self.global(y)),
        }
    }

    /// Nearest candidate to `v` with its margin, as for [`nearest`] but
    /// measured in a shared local chart when there is one.
    fn nearest(&self, cands: &[Pt], v: &Pt) -> (usize, f64) {
        let d: Vec<f64> = cands.iter().map(|c| self.distance(c, v)).collect();
        let best = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        let second = (0..d.len())
            .filter(|&k| self.distance(&cands[k], &cands[best]) > 1e-9 * d[best].max(1e-300))
            .map(|k| d[k])
            .fold(f64::INFINITY, f64::min);
        let margin = if d[best] == 0.0 { 0.0 } else { d[best] / second };
        (best, margin)
    }

    /// First-order guess for the value at `to` given `val` at `from`: near
    /// an anchor, where every `Φ_n` fixes the anchor, scale about it.
    /// Value expected at `to` when continuing `val` from `from`. Near an
    /// anchor the map is treated as a scaling about it. Elsewhere the last
    /// accepted hop `prev` gives a secant in charts centered at `from` and
    /// `val`.
    fn predict(&self, prev: Option<(Pt, Pt)>, from: &Pt, val: &Pt, to: &Pt) -> Pt {
        if let (Pt::Local(a, z0), Pt::Local(b, w0), Pt::Local(c, z1)) = (from, val, to) {
            if a == b && b == c {
                if let (Some(z0), Some(w0), Some(z1)) = (z0.affine(), w0.affine(), z1.affine()) {
                    if z0.norm() > 0.0 {
                        return Pt::Local(*a, SpherePoint::finite(w0 * (z1 / z0)));
                    }
                }
            }
        }
        let Some((p0, v0)) = prev else { return *val };
        let cz = self.global(from).centered_chart();
        let cw = self.global(val).centered_chart();
        let (Some(z0), Some(z1), Some(w0)) = (
            cz.apply(&self.global(&p0)).affine(),
            cz.apply(&self.global(to)).affine(),
            cw.apply(&self.global(&v0)).affine(),
        ) else {
            return *val;
        };
        if !(z0.norm() > 0.0) {
            return *val;
        }
        let w1 = SpherePoint::finite(w0 * (z1 / z0));
        self.settle(cw.inverse().apply(&w1))
    }

    /// Point a fraction `f` of the way from `x` to `y`.
    fn toward(&self, x: &Pt, y: &Pt, f: f64) -> Pt {
        let go = |p: &SpherePoint, q: &SpherePoint| SpherePoint::from_xyz(&crate::sphere::slerp(&p.to_xyz(), &q.to_xyz(), f));
        match (x, y) {
            (Pt::Local(a, z), Pt::Local(b, w)) if a == b => Pt::Local(*a, go(z, w)),
            _ => self.settle(go(&self.global(x), &self.global(y))),
        }
    }

    /// Chordal distance from `x` to the critical points of `Q` that are not
    /// anchors.
    fn critical_distance(&self, x: &Pt) -> f64 {
        let g = self.global(x);
        self.critical.iter().map(|c| c.chordal(&g)).fold(f64::INFINITY, f64::min)
    }

    /// Length scale resolvable at `x`: distance to its anchor in a local
    /// chart, else 1.
    fn scale(&self, x: &Pt) -> f64 {
        match x {
            Pt::Local(_, z) => origin_distance(z).min(1.0),
            Pt::Global(_) => 1.0,
        }
    }

    fn forward(&self, x: Pt) -> Pt {
        match x {
            Pt::Global(p) => self.settle(self.q.evaluate(&p)),
            Pt::Local(a, z) => self.localize(self.succ[a], self.q_local[a].evaluate(&z)),
        }
    }

    fn preimages(&self, level: usize, x: &Pt) -> Result<Vec<Pt>, RationalError> {
        let roots = self.maps[level].fiber_roots(&self.global(x))?;
        let Pt::Local(b, omega) = *x else {
            return Ok(roots.into_iter().map(|r| self.settle(r)).collect());
        };
        let mut local: Vec<Option<Vec<SpherePoint>>> = vec![None; self.anchors.len()];
        let mut out = Vec::with_capacity(roots.len());
        for r in roots {
            let hit = (0..self.anchors.len())
                .find(|&a| self.succ[a] == b && r.chordal(&self.anchors[a]) < ANCHOR_RADIUS);
            match hit {
                Some(a) => {
                    if local[a].is_none() {
                        local[a] = Some(self.r_local[level][a].fiber_roots(&omega)?);
                    }
                    let target = self.anchors[a].centered_chart().apply(&r);
                    let best = local[a]
                        .as_ref()
                        .unwrap()
                        .iter()
                        .min_by(|u, v| u.chordal(&target).total_cmp(&v.chordal(&target)))
                        .copied()
                        .unwrap();
                    out.push(self.localize(a, best));
                }
                None => out.push(self.settle(r)),
            }
        }
        Ok(out)
    }
}


/// Nearest candidate to `v` and the ratio of its distance to the
/// runner-up's (candidates coinciding with the nearest are skipped).
fn nearest(cands: &[SpherePoint], v: &SpherePoint) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in cands.iter().enumerate() {
        let d = c.chordal(v);
        if d < best.1 {
            best = (i, d);
        }
    }
    let pick = cands[best.0];
    let second = cands
        .iter()
        .filter(|c| c.chordal(&pick) > 1e-9)
        .map(|c| c.chordal(v))
        .fold(f64::INFINITY, f64::min);
    let margin = if best.1 == 0.0 { 0.0 } else { best.1 / second };
    (best.0, margin)
}

type Cell = (i32, i32, i32);

/// Spatial hash of the curve segments (as chords in R³), tagged by
/// generation, for distance queries up to a bounded radius.
#[derive(Clone, Debug)]
pub struct CurveIndex {
    cell: f64,
    segments: Vec<([f64; 3], [f64; 3], usize)>,
    cells: std::collections::HashMap<Cell, Vec<usize>>,
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn length(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Distance from `p` on the unit sphere to the short great-circle arc from
/// `a` to `b`, less a pad of `|a - b|²/4` for the bend of the sampled curve
/// away from that arc.
fn segment_distance(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let ends = length(&sub(p, a)).min(length(&sub(p, b)));
    let pad = dot(&sub(a, b), &sub(a, b)) / 4.0;
    let n = cross(a, b);
    let nn = length(&n);
    let d = if nn < 1e-12 {
        ends
    } else {
        let n = [n[0] / nn, n[1] / nn, n[2] / nn];
        let h = dot(p, &n);
        let f = [p[0] - h * n[0], p[1] - h * n[1], p[2] - h * n[2]];
        let fl = length(&f);
        if fl < 1e-12 {
            ends
        } else {
            let m = [f[0] / fl, f[1] / fl, f[2] / fl];
            if dot(&cross(a, &m), &n) >= 0.0 && dot(&cross(&m, b), &n) >= 0.0 {
                length(&sub(p, &m))
            } else {
                ends
            }
        }
    };
    (d - pad).max(0.0)
}

impl CurveIndex {
    /// Indexes the nontrivial curves of generations `1..`.
    pub fn new(curves: &CurveFamily, cell: f64) -> Self {
        let mut segments = Vec::new();
        for (g, gen) in curves.generations.iter().enumerate().skip(1) {
            for c in gen {
                let pts: Vec<[f64; 3]> = c.points().map(|p| p.to_xyz()).collect();
                for w in pts.windows(2) {
                    segments.push((w[0], w[1], g));
                }
            }
        }
        let mut cells: std::collections::HashMap<Cell, Vec<usize>> = Default::default();
        let key = |x: f64| (x / cell).floor() as i32;
        for (i, (a, b, _)) in segments.iter().enumerate() {
            let lo: Vec<i32> = (0..3).map(|k| key(a[k].min(b[k]))).collect();
            let hi: Vec<i32> = (0..3).map(|k| key(a[k].max(b[k]))).collect();
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        cells.entry((x, y, z)).or_default().push(i);
                    }
                }
            }
        }
        Self { cell, segments, cells }
    }

    /// Distance from `p` to the curves of generations `1..=max_gen`, exact
    /// when below `radius` and otherwise some value `≥ radius`.
    pub fn distance(&self, p: &SpherePoint, max_gen: usize, radius: f64) -> f64 {
        if max_gen == 0 || self.segments.is_empty() {
            return f64::INFINITY;
        }
        let x = p.to_xyz();
        let r = (radius / self.cell).ceil() as i32;
        let c: Vec<i32> = (0..3).map(|k| (x[k] / self.cell).floor() as i32).collect();
        let mut best = f64::INFINITY;
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    let Some(list) = self.cells.get(&(c[0] + dx, c[1] + dy, c[2] + dz)) else { continue };
                    for &i in list {
                        let (a, b, g) = &self.segments[i];
                        if *g <= max_gen {
                            best = best.min(segment_distance(&x, a, b));
                        }
                    }
                }
            }
        }
        best
    }
}

/// Axis-aligned rectangle in the affine chart `z`, or in `1/z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartRect {
    pub min: [f64; 2],
    pub max: [f64; 2],
    #[serde(default)]
    pub at_infinity: bool,
}

impl ChartRect {
    pub fn square(half: f64) -> Self {
        Self { min: [-half, -half], max: [half, half], at_infinity: false }
    }

    pub fn swapped(self) -> Self {
        Self { at_infinity: !self.at_infinity, ..self }
    }

    pub fn to_point(&self, c: C64) -> SpherePoint {
        if self.at_infinity {
            SpherePoint::new(C64::new(1.0, 0.0), c)
        } else {
            SpherePoint::finite(c)
        }
    }

    pub fn coordinate(&self, p: &SpherePoint) -> Option<C64> {
        if self.at_infinity {
            SpherePoint::new(p.v(), p.u()).affine()
        } else {
            p.affine()
        }
    }

    pub fn contains(&self, c: C64) -> bool {
        c.re >= self.min[0] && c.re <= self.max[0] && c.im >= self.min[1] && c.im <= self.max[1]
    }
}

/// The unit squares in `z` and in `1/z`, which together cover the sphere.
pub fn sphere_cover() -> Vec<ChartRect> {
    vec![ChartRect::square(1.0), ChartRect::square(1.0).swapped()]
}

/// One chart's grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub region: ChartRect,
    pub nx: usize,
    pub ny: usize,
    /// Sample index of each grid node, row-major, `None` when excluded.
    pub grid: Vec<Option<usize>>,
}

impl Patch {
    pub fn node(&self, i: usize, j: usize) -> Option<usize> {
        (i < self.nx && j < self.ny).then(|| self.grid[j * self.nx + i]).flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshOptions {
    /// Chordal exclusion radius around the curves; derived when `None`.
    pub tube: Option<f64>,
    /// Normalization points, used as propagation seeds.
    pub seeds: Vec<SpherePoint>,
    /// Critical points of `Q`; seeds there get no edges.
    pub critical: Vec<SpherePoint>,
    /// Chordal exclusion radius around `critical`; `2 × spacing` when `None`.
    pub critical_radius: Option<f64>,
}

impl MeshOptions {
    pub fn for_surgery(s: &Surgery) -> Result<Self, RationalError> {
        Ok(Self {
            tube: None,
            seeds: s.spec.normalization.iter().map(|&i| s.spec.marked[i]).collect(),
            critical: s.spec.q.critical_points()?.into_iter().map(|(c, _)| c).collect(),
            critical_radius: None,
        })
    }
}

/// Grid samples of chart rectangles with the curve tubes and small disks
/// around critical points removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub patches: Vec<Patch>,
    pub spacing: f64,
    pub samples: Vec<SpherePoint>,
    pub edges: Vec<(usize, usize)>,
    /// Seed samples paired with whether they propagate.
    pub seeds: Vec<(usize, bool)>,
    pub tube: f64,
    pub level: usize,
}

impl Mesh {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Grid squares whose four corners survive, counter-clockwise.
    pub fn squares(&self) -> Vec<[usize; 4]> {
        let mut out = Vec::new();
        for p in &self.patches {
            for j in 0..p.ny.saturating_sub(1) {
                for i in 0..p.nx.saturating_sub(1) {
                    if let (Some(a), Some(b), Some(c), Some(d)) =
                        (p.node(i, j), p.node(i + 1, j), p.node(i + 1, j + 1), p.node(i, j + 1))
                    {
                        out.push([a, b, c, d]);
                    }
                }
            }
        }
        out
    }

    /// A surviving sample near `p`: the nearest within the smallest grid
    /// window around `p` that contains one, searched out to past the tube.
    /// Seeds are never returned.
    pub fn nearest_sample(&self, p: &SpherePoint) -> Option<usize> {
        let h = self.spacing;
        let coords: Vec<Option<C64>> = self.patches.iter().map(|q| q.region.coordinate(p)).collect();
        let mut best: Option<(usize, f64)> = None;
        let consider = |s: usize, best: &mut Option<(usize, f64)>| {
            if self.seeds.iter().any(|&(k, _)| k == s) {
                return;
            }
            let d = self.samples[s].chordal(p);
            if best.is_none_or(|(_, e)| d < e) {
                *best = Some((s, d));
            }
        };
        let reach = (self.tube / h).ceil() as i64 + 2;
        let mut found_at = None;
        for w in 1..=reach {
            for (patch, c) in self.patches.iter().zip(&coords) {
                let Some(c) = c else { continue };
                let ci = ((c.re - patch.region.min[0]) / h).round() as i64;
                let cj = ((c.im - patch.region.min[1]) / h).round() as i64;
                if ci < -w || cj < -w || ci > patch.nx as i64 + w || cj > patch.ny as i64 + w {
                    continue;
                }
                for j in cj - w..=cj + w {
                    for i in ci - w..=ci + w {
                        let ring = (i - ci).abs() == w || (j - cj).abs() == w || w == 1;
                        if ring && i >= 0 && j >= 0 {
                            if let Some(s) = patch.node(i as usize, j as usize) {
                                consider(s, &mut best);
                            }
                        }
                    }
                }
            }
            if best.is_some() {
                match found_at {
                    None => found_at = Some(w),
                    Some(_) => break,
                }
            }
        }
        best.map(|b| b.0)
    }

    /// Grid samples within chordal `radius` of `p`.
    pub fn samples_near(&self, p: &SpherePoint, radius: f64) -> Vec<usize> {
        let h = self.spacing;
        let w = (1.5 * radius / h).ceil() as i64 + 1;
        let mut out = Vec::new();
        for patch in &self.patches {
            let Some(c) = patch.region.coordinate(p) else { continue };
            let ci = ((c.re - patch.region.min[0]) / h).round() as i64;
            let cj = ((c.im - patch.region.min[1]) / h).round() as i64;
            for j in (cj - w).max(0)..=(cj + w).min(patch.ny as i64 - 1) {
                for i in (ci - w).max(0)..=(ci + w).min(patch.nx as i64 - 1) {
                    if let Some(s) = patch.node(i as usize, j as usize) {
                        if self.samples[s].chordal(p) <= radius && !out.contains(&s) {
                            out.push(s);
                        }
                    }
                }
            }
        }
        out
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.samples.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

}

/// Mesh of `regions` at chart spacing `density`, avoiding the tubes around
/// the curves of generations `1..=n`.
pub fn build_mesh(
    regions: &[ChartRect],
    curves: &CurveFamily,
    index: &CurveIndex,
    n: usize,
    density: f64,
    opts: &MeshOptions,
) -> Result<Mesh, SemiconjError> {
    if curves.depth() < n {
        return Err(SemiconjError::CurvesTooShallow { have: curves.depth(), want: n });
    }
    let h = density;
    let gap = curves.generations.iter().take(n + 1).flatten().map(|c| c.max_gap()).fold(0.0, f64::max);
    let tube = opts.tube.unwrap_or(2.0 * h + gap);
    let crit_r = opts.critical_radius.unwrap_or(2.0 * h);
    let is_seed = |p: &SpherePoint| opts.seeds.iter().any(|s| s.chordal(p) < 1e-12);
    let crit: Vec<SpherePoint> = opts.critical.iter().filter(|c| !is_seed(c)).copied().collect();
    let crit_seeds: Vec<SpherePoint> = opts.critical.iter().filter(|c| is_seed(c)).copied().collect();
    let mut patches = Vec::new();
    let mut samples: Vec<SpherePoint> = Vec::new();
    let mut edges = Vec::new();
    for region in regions {
        let nx = ((region.max[0] - region.min[0]) / h).round() as usize + 1;
        let ny = ((region.max[1] - region.min[1]) / h).round() as usize + 1;
        let nodes: Vec<SpherePoint> = (0..nx * ny)
            .map(|k| region.to_point(C64::new(region.min[0] + (k % nx) as f64 * h, region.min[1] + (k / nx) as f64 * h)))
            .collect();
        let keep: Vec<bool> = nodes
            .par_iter()
            .map(|p| {
                index.distance(p, n, tube) > tube
                    && crit.iter().all(|c| c.chordal(p) > crit_r)
                    && crit_seeds.iter().all(|c| c.chordal(p) > crit_r || c.chordal(p) < 1e-12)
            })
            .collect();
        let mut grid = vec![None; nx * ny];
        for (k, p) in nodes.iter().enumerate() {
            if keep[k] {
                grid[k] = Some(samples.len());
                samples.push(*p);
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                let Some(a) = grid[j * nx + i] else { continue };
                if i + 1 < nx {
                    if let Some(b) = grid[j * nx + i + 1] {
                        edges.push((a, b));
                    }
                }
                if j + 1 < ny {
                    if let Some(b) = grid[(j + 1) * nx + i] {
                        edges.push((a, b));
                    }
                }
            }
        }
        patches.push(Patch { region: *region, nx, ny, grid });
    }
    if samples.is_empty() {
        return Err(SemiconjError::EmptyMesh);
    }
    let mut mesh = Mesh { patches, spacing: h, samples, edges, seeds: Vec::new(), tube, level: n };
    // glue each later patch to the earlier ones where they overlap
    for pi in 1..mesh.patches.len() {
        let p = mesh.patches[pi].clone();
        for j in 0..p.ny {
            for i in 0..p.nx {
                let Some(a) = p.node(i, j) else { continue };
                let pt = mesh.samples[a];
                for qi in 0..pi {
                    let q = &mesh.patches[qi];
                    let Some(c) = q.region.coordinate(&pt) else { continue };
                    if !q.region.contains(c) {
                        continue;
                    }
                    let (gi, gj) = (((c.re - q.region.min[0]) / h).round() as usize, ((c.im - q.region.min[1]) / h).round() as usize);
                    if let Some(b) = q.node(gi, gj) {
                        if mesh.samples[b].chordal(&pt) < 2.0 * h {
                            mesh.edges.push((a, b));
                        }
                    }
                }
            }
        }
    }
    for s in &opts.seeds {
        let active = !opts.critical.iter().any(|q| q.chordal(s) < 1e-12);
        let inside = mesh.patches.iter().any(|p| p.region.coordinate(s).is_some_and(|c| p.region.contains(c)));
        if !inside {
            continue;
        }
        let idx = match mesh.samples.iter().position(|x| x.chordal(s) < 1e-9 * h) {
            Some(k) => {
                mesh.samples[k] = *s;
                k
            }
            None => {
                let k = mesh.samples.len();
                mesh.samples.push(*s);
                if active {
                    for j in 0..k {
                        if mesh.samples[j].chordal(s) <= 1.5 * h {
                            mesh.edges.push((k, j));
                        }
                    }
                }
                k
            }
        };
        if !active {
            mesh.edges.retain(|&(a, b)| a != idx && b != idx);
        }
        mesh.seeds.push((idx, active));
    }
    Ok(mesh)
}

/// Largest candidate margin accepted on one continuation hop before it is
/// subdivided.
const HOP_LIMIT: f64 = 0.4;

/// Hops allowed when continuing a branch to an off-mesh point.
const MAX_HOPS: usize = 4000;

/// Largest hop of an orbit point relative to its distance from the
/// critical points of `Q`.
const RELATIVE_HOP: f64 = 0.25;

/// `Φ_n` on the samples of one mesh.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldApprox {
    pub level: usize,
    pub values: Vec<Option<SpherePoint>>,
    pub seeds: Vec<usize>,
    /// Per mesh edge: the candidate margin seen from the other end.
    pub margins: Vec<f64>,
    pub edge_consistent: Vec<bool>,
    pub max_margin: f64,
    /// Largest branch change around a grid square.
    pub max_defect: f64,
    pub unassigned: usize,
    #[serde(skip)]
    exact: Vec<Option<Pt>>,
}

impl FieldApprox {
    pub fn consistent(&self) -> bool {
        self.edge_consistent.iter().all(|&c| c)
    }
}

/// Meshes and fields for levels `0..=depth`, each level resolving branches
/// against the one below.
#[derive(Clone, Debug)]
pub struct FieldStack {
    pub tower: Tower,
    pub index: CurveIndex,
    pub meshes: Vec<Mesh>,
    pub fields: Vec<FieldApprox>,
    adjacency: Vec<Vec<Vec<usize>>>,
    /// Levels whose mesh was refined once after a branch ambiguity.
    pub refined: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldOptions {
    pub regions: Vec<ChartRect>,
    pub density: f64,
    pub mesh: MeshOptions,
    /// Halve the spacing once on a branch ambiguity.
    pub refine: bool,
}

impl FieldStack {
    pub fn build(tower: Tower, curves: &CurveFamily, depth: usize, opts: &FieldOptions) -> Result<Self, SemiconjError> {
        if depth > tower.depth() {
            return Err(SemiconjError::TooFewMaps { have: tower.depth(), want: depth });
        }
        let cell = (4.0 * opts.density).clamp(0.01, 0.25);
        let index = CurveIndex::new(curves, cell);
        let mut stack = Self { tower, index, meshes: Vec::new(), fields: Vec::new(), adjacency: Vec::new(), refined: Vec::new() };
        for j in 0..=depth {
            let mesh = build_mesh(&opts.regions, curves, &stack.index, j, opts.density, &opts.mesh)?;
            let (mesh, field) = match stack.propagate(j, &mesh) {
                Err(SemiconjError::BranchAmbiguity { .. }) if opts.refine => {
                    let fine = build_mesh(&opts.regions, curves, &stack.index, j, opts.density / 2.0, &opts.mesh)?;
                    let field = stack.propagate(j, &fine)?;
                    stack.refined.push(j);
                    (fine, field)
                }
                other => (mesh, other?),
            };
            stack.adjacency.push(mesh.neighbors());
            stack.meshes.push(mesh);
            stack.fields.push(field);
        }
        Ok(stack)
    }

    pub fn depth(&self) -> usize {
        self.fields.len().saturating_sub(1)
    }

    /// `Φ_j(z)` at an arbitrary point, continued from the nearest sample;
    /// `None` on or too close to the discontinuity curves.
    pub fn value(&self, j: usize, z: &SpherePoint) -> Option<SpherePoint> {
        self.eval(j, self.tower.settle(*z)).map(|p| self.tower.global(&p))
    }

    fn eval(&self, j: usize, x: Pt) -> Option<Pt> {
        // R_0 = Q and the first lift has no cuts, so it is the identity.
        if j <= 1 {
            return Some(x);
        }
        let s = self.meshes[j].nearest_sample(&self.tower.global(&x))?;
        let v = self.fields[j].exact[s]?;
        let from = self.tower.settle(self.meshes[j].samples[s]);
        let prev = self.adjacency[j][s]
            .iter()
            .find_map(|&a| Some((self.tower.settle(self.meshes[j].samples[a]), self.fields[j].exact[a]?)));
        self.continue_to(j, prev, from, v, x)
    }

    fn candidates(&self, j: usize, x: &Pt) -> Option<Vec<Pt>> {
        let y = self.eval(j - 1, self.tower.forward(*x))?;
        self.tower.preimages(j - 1, &y).ok()
    }

    /// Orbit of `x` down the tower with the values of the lower fields:
    /// entry `k` is `(Q^{j-k} x, Φ_k(Q^{j-k} x))` given `v = Φ_j(x)`.
    fn chain(&self, j: usize, x: Pt, v: Pt) -> Vec<(Pt, Pt)> {
        let mut out = vec![(x, v); j + 1];
        for k in (0..j).rev() {
            let (x, v) = out[k + 1];
            out[k] = (self.tower.forward(x), self.tower.apply(k, &v));
        }
        out
    }

    /// Lifts one hop of the whole chain to the orbit of `q`, choosing at each
    /// level the preimage nearest the predicted value.
    fn lift_hop(&self, j: usize, here: &[(Pt, Pt)], before: Option<&[(Pt, Pt)]>, q: Pt) -> Option<Vec<(Pt, Pt)>> {
        let t = &self.tower;
        let mut pts = vec![q; j + 1];
        for k in (0..j).rev() {
            pts[k] = t.forward(pts[k + 1]);
        }
        let mut out: Vec<(Pt, Pt)> = pts.iter().take(2).map(|p| (*p, *p)).collect();
        for k in 2..=j {
            if t.distance(&here[k].0, &pts[k]) > RELATIVE_HOP * t.critical_distance(&here[k].0) {
                return None;
            }
            let c = t.preimages(k - 1, &out[k - 1].1).ok()?;
            let guess = t.predict(before.map(|b| b[k]), &here[k].0, &here[k].1, &pts[k]);
            let (i, m) = t.nearest(&c, &guess);
            if m > HOP_LIMIT {
                return None;
            }
            out.push((pts[k], c[i]));
        }
        Some(out)
    }

    /// Follows the branch `val` at `from` along the geodesic to `to`, lifting
    /// the orbit through every level at once. Hops grow on success and
    /// shrink when they land too near a discontinuity curve or leave the
    /// candidates unseparated.
    fn continue_to(&self, j: usize, prev: Option<(Pt, Pt)>, from: Pt, val: Pt, to: Pt) -> Option<Pt> {
        if j <= 1 {
            return Some(to);
        }
        let t = &self.tower;
        let floor = 1e-9 * t.scale(&to);
        let mut here = self.chain(j, from, val);
        let mut before = prev.map(|(p, v)| self.chain(j, p, v));
        let mut step = t.distance(&from, &to);
        for _ in 0..MAX_HOPS {
            let p = here[j].0;
            let remaining = t.distance(&p, &to);
            if remaining < 1e-300 {
                return Some(here[j].1);
            }
            step = step.min(remaining);
            if step < floor.min(remaining) {
                return None;
            }
            let last = step >= remaining;
            let q = if last { to } else { t.toward(&p, &to, step / remaining) };
            let hop = t.distance(&p, &q);
            if self.index.distance(&t.global(&q), j - 1, 2.0 * hop) > hop {
                if let Some(next) = self.lift_hop(j, &here, before.as_deref(), q) {
                    if last {
                        return Some(next[j].1);
                    }
                    before = Some(std::mem::replace(&mut here, next));
                    step *= 2.0;
                    continue;
                }
            }
            before = None;
            step *= 0.5;
        }
        None
    }

    /// Branch selection on `mesh` by best-first propagation from the seeds.
    fn propagate(&self, j: usize, mesh: &Mesh) -> Result<FieldApprox, SemiconjError> {
        let n = mesh.len();
        let pts: Vec<Pt> = mesh.samples.iter().map(|s| self.tower.settle(*s)).collect();
        let cands: Vec<Option<Vec<Pt>>> = if j == 0 {
            pts.iter().map(|p| Some(vec![*p])).collect()
        } else {
            pts.par_iter().map(|p| self.candidates(j, p)).collect()
        };
        let globals: Vec<Option<Vec<SpherePoint>>> = cands
            .iter()
            .map(|c| c.as_ref().map(|c| c.iter().map(|p| self.tower.global(p)).collect()))
            .collect();
        let adj = mesh.neighbors();
        let mut exact: Vec<Option<Pt>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<_>, exact: &[Option<Pt>], s: usize| {
            let v = self.tower.global(exact[s].as_ref().unwrap());
            for &t in &adj[s] {
                if exact[t].is_none() {
                    if let Some(g) = &globals[t] {
                        let (i, m) = nearest(g, &v);
                        heap.push((Reverse(m.to_bits()), t, i, s));
                    }
                }
            }
        };
        for &(s, active) in &mesh.seeds {
            let Some(g) = &globals[s] else { continue };
            let (i, _) = nearest(g, &mesh.samples[s]);
            exact[s] = Some(cands[s].as_ref().unwrap()[i]);
            if active {
                push(&mut heap, &exact, s);
            }
        }
        let reach = 2.0 * (mesh.tube + mesh.spacing);
        loop {
            while let Some((Reverse(bits), t, i, s)) = heap.pop() {
                if exact[t].is_some() {
                    continue;
                }
                let m = f64::from_bits(bits);
                if m > MARGIN_LIMIT {
                    return Err(SemiconjError::BranchAmbiguity { a: mesh.samples[s], b: mesh.samples[t], margin: m });
                }
                exact[t] = Some(cands[t].as_ref().unwrap()[i]);
                push(&mut heap, &exact, t);
            }
            if j == 0 {
                break;
            }
            // continue across the tubes of the newest curves, which are not
            // discontinuities at this level
            let pending: Vec<usize> = (0..n).filter(|&t| exact[t].is_none() && cands[t].is_some()).collect();
            let bridged: Vec<(usize, Pt)> = pending
                .par_iter()
                .filter_map(|&u| {
                    let a = mesh
                        .samples_near(&mesh.samples[u], reach)
                        .into_iter()
                        .filter(|&a| exact[a].is_some() && !mesh.seeds.iter().any(|&(k, _)| k == a))
                        .min_by(|&a, &b| {
                            let (da, db) = (mesh.samples[a].chordal(&mesh.samples[u]), mesh.samples[b].chordal(&mesh.samples[u]));
                            da.total_cmp(&db)
                        })?;
                    Some((u, self.continue_to(j, None, pts[a], exact[a]?, pts[u])?))
                })
                .collect();
            if bridged.is_empty() {
                break;
            }
            for (u, v) in bridged {
                exact[u] = Some(v);
            }
            for u in pending {
                if exact[u].is_some() {
                    push(&mut heap, &exact, u);
                }
            }
        }
        let step = |v: &SpherePoint, to: usize| -> Option<(usize, f64)> {
            globals[to].as_ref().map(|g| nearest(g, v))
        };
        let mut margins = Vec::with_capacity(mesh.edges.len());
        let mut edge_consistent = Vec::with_capacity(mesh.edges.len());
        for &(a, b) in &mesh.edges {
            let (Some(va), Some(vb)) = (exact[a], exact[b]) else {
                margins.push(0.0);
                edge_consistent.push(true);
                continue;
            };
            let (i, m) = step(&self.tower.global(&va), b).unwrap();
            margins.push(m);
            let picked = globals[b].as_ref().unwrap()[i];
            edge_consistent.push(picked.chordal(&self.tower.global(&vb)) < 1e-9);
        }
        let mut max_defect: f64 = 0.0;
        for sq in mesh.squares() {
            let Some(v0) = exact[sq[0]] else { continue };
            if sq.iter().any(|&k| exact[k].is_none()) {
                continue;
            }
            let mut v = self.tower.global(&v0);
            for w in 0..4 {
                let to = sq[(w + 1) % 4];
                let (i, _) = step(&v, to).unwrap();
                v = globals[to].as_ref().unwrap()[i];
            }
            max_defect = max_defect.max(v.chordal(&self.tower.global(&v0)));
        }
        let values = exact.iter().map(|p| p.map(|p| self.tower.global(&p))).collect();
        Ok(FieldApprox {
            level: j,
            values,
            seeds: mesh.seeds.iter().map(|s| s.0).collect(),
            max_margin: margins.iter().copied().fold(0.0, f64::max),
            margins,
            edge_consistent,
            max_defect,
            unassigned: exact.iter().filter(|p| p.is_none()).count(),
            exact,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub level: usize,
    /// `sup |R_{n−1}(Φ_n z) − Φ_{n−1}(Qz)|`.
    pub exact_step: f64,
    /// `sup |R(Φ_n z) − Φ_n(Qz)|` for the last map `R` of the tower.
    pub limit: f64,
    pub samples: usize,
}

/// Chordal sup residuals of both identities over the level-`n` samples.
pub fn semiconjugacy_residual(stack: &FieldStack, n: usize) -> Result<Residuals, SemiconjError> {
    let t = &stack.tower;
    let last = t.depth() - 1;
    let field = &stack.fields[n];
    let rows: Vec<(f64, f64)> = stack.meshes[n]
        .samples
        .par_iter()
        .zip(&field.exact)
        .filter_map(|(s, v)| {
            let v = (*v)?;
            let qz = t.forward(t.settle(*s));
            let step = if n == 0 {
                0.0
            } else {
                t.distance(&t.apply(n - 1, &v), &stack.eval(n - 1, qz)?)
            };
            let limit = t.distance(&t.apply(last, &v), &stack.eval(n, qz)?);
            Some((step, limit))
        })
        .collect();
    if rows.is_empty() {
        return Err(SemiconjError::MeshMismatch);
    }
    Ok(Residuals {
        level: n,
        exact_step: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        limit: rows.iter().map(|r| r.1).fold(0.0, f64::max),
        samples: rows.len(),
    })
}

/// Field distances at or below this are rounding noise.
pub const DECAY_NOISE: f64 = 1e-12;

/// Sup distances between consecutive fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    /// `δ_n` in the expanding metric, for `n = 0..`.
    pub deltas: Vec<f64>,
    pub chordal: Vec<f64>,
    /// `δ_{n+1} / δ_n`, zero when `δ_n` vanishes.
    pub ratios: Vec<f64>,
}

impl DecayTable {
    pub fn ratios_within(&self, bound: f64, burn_in: usize) -> bool {
        self.ratios.iter().skip(burn_in).all(|&r| r <= bound)
    }

    /// `Σ_{n≥n₀} δ_n ≤ δ_{n₀}·E/(E−1)·(1+slack)`, with distances at or
    /// below [`DECAY_NOISE`] counted as zero.
    pub fn tail_within(&self, expansion: f64, burn_in: usize, slack: f64) -> bool {
        let floor = |d: f64| if d > DECAY_NOISE { d } else { 0.0 };
        let Some(&d0) = self.deltas.get(burn_in) else { return true };
        let d0 = floor(d0);
        let total: f64 = self.deltas.iter().skip(burn_in).map(|&d| floor(d)).sum();
        total <= d0 * expansion / (expansion - 1.0) * (1.0 + slack)
    }
}

/// `δ_n = sup d(Φ_n z, Φ_{n+1} z)` over the level-`(n+1)` samples, skipping
/// samples whose values come within `radius` of `avoid` (where the metric
/// density is singular).
pub fn uniform_convergence_estimate(
    stack: &FieldStack,
    metric: &ExpandingMetric,
    avoid: &[SpherePoint],
    radius: f64,
) -> Result<DecayTable, SemiconjError> {
    let t = &stack.tower;
    let mut deltas = Vec::new();
    let mut chordal = Vec::new();
    for n in 0..stack.depth() {
        let rows: Vec<(f64, f64)> = stack.meshes[n + 1]
            .samples
            .par_iter()
            .zip(&stack.fields[n + 1].exact)
            .filter_map(|(s, v)| {
                let b = t.global(&(*v)?);
                let a = t.global(&stack.eval(n, t.settle(*s))?);
                if avoid.iter().any(|p| p.chordal(&a) < radius || p.chordal(&b) < radius) {
                    return None;
                }
                let c = a.chordal(&b);
                let steps = ((c / 1e-3).ceil() as usize).clamp(1, 64);
                Some((metric.length(&a, &b, steps), c))
            })
            .collect();
        if rows.is_empty() {
            return Err(SemiconjError::MeshMismatch);
        }
        deltas.push(rows.iter().map(|r| r.0).fold(0.0, f64::max));
        chordal.push(rows.iter().map(|r| r.1).fold(0.0, f64::max));
    }
    let ratios = deltas.windows(2).map(|w| if w[0] > DECAY_NOISE { w[1] / w[0] } else { 0.0 }).collect();
    Ok(DecayTable { deltas, chordal, ratios })
}

/// Largest `|∂Φ_n/∂z̄| / |∂Φ_n/∂z|` from central differences at grid nodes
/// within chordal `radius` of `center`, with values read in the chart
/// centred at the node's own value.
pub fn cauchy_riemann_residual(stack: &FieldStack, n: usize, center: &SpherePoint, radius: f64) -> Option<f64> {
    let mesh = &stack.meshes[n];
    let vals = &stack.fields[n].values;
    let mut worst: Option<f64> = None;
    for patch in &mesh.patches {
        for j in 1..patch.ny.saturating_sub(1) {
            for i in 1..patch.nx.saturating_sub(1) {
                let Some(c) = patch.node(i, j) else { continue };
                if mesh.samples[c].chordal(center) > radius {
                    continue;
                }
                let ids = [patch.node(i + 1, j), patch.node(i - 1, j), patch.node(i, j + 1), patch.node(i, j - 1)];
                let Some(v0) = vals[c] else { continue };
                let chart = v0.centered_chart();
                let mut f = [C64::new(0.0, 0.0); 4];
                let mut ok = true;
                for (k, id) in ids.iter().enumerate() {
                    match id.and_then(|id| vals[id]).and_then(|v| chart.apply(&v).affine()) {
                        Some(w) => f[k] = w,
                        None => ok = false,
                    }
                }
                if !ok {
                    continue;
                }
                let fx = (f[0] - f[1]) / (2.0 * mesh.spacing);
                let fy = (f[2] - f[3]) / (2.0 * mesh.spacing);
                let dbar = (fx + C64::i() * fy) * 0.5;
                let dz = (fx - C64::i() * fy) * 0.5;
                let r = dbar.norm() / dz.norm();
                worst = Some(worst.map_or(r, |w: f64| w.max(r)));
            }
        }
    }
    worst
}

/// `sup d(Φ_n^a z, Φ_n^b z)` over the level-`n` samples of `a` at which
/// `b` can be continued.
pub fn field_distance(a: &FieldStack, b: &FieldStack, n: usize) -> Result<f64, SemiconjError> {
    let rows: Vec<f64> = a.meshes[n]
        .samples
        .par_iter()
        .zip(&a.fields[n].values)
        .filter_map(|(s, v)| Some(v.as_ref()?.chordal(&b.value(n, s)?)))
        .collect();
    if rows.is_empty() {
        return Err(SemiconjError::MeshMismatch);
    }
    Ok(rows.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pullback::{run_pullback, ContinuationOptions, ThurstonRun};
    use crate::sphere::SpherePath;
    use crate::surgery::{instances, pullback_curves, LiftOptions};

    fn stack_for(s: &Surgery, run: &ThurstonRun, depth: usize, density: f64) -> FieldStack {
        let curves = pullback_curves(&s.spec.q, &s.spec.paths(), depth, LiftOptions::default()).unwrap();
        let mesh = MeshOptions::for_surgery(s).unwrap();
        let tower = Tower::new(&s.spec.q, &run.maps(), &mesh.seeds);
        let opts = FieldOptions { regions: sphere_cover(), density, mesh, refine: true };
        FieldStack::build(tower, &curves, depth, &opts).unwrap()
    }

    fn no_curves(q: &RationalMap, path: SpherePath) -> CurveFamily {
        pullback_curves(q, &[path], 0, LiftOptions::default()).unwrap()
    }

    #[test]
    fn quadratic_fiber_matches_root_finder() {
        let q = instances::basilica_map();
        for w in [SpherePoint::finite(C64::new(0.3, -0.7)), SpherePoint::infinity(), SpherePoint::real(-1.0)] {
            let mut a = q.fiber_roots(&w).unwrap();
            for z in &a {
                assert!(q.evaluate(z).chordal(&w) < 1e-14);
            }
            let b: Vec<SpherePoint> = q.preimages(&w).unwrap().into_iter().flat_map(|(p, m)| std::iter::repeat(p).take(m)).collect();
            a.sort_by(|x, y| x.to_xyz().partial_cmp(&y.to_xyz()).unwrap());
            assert_eq!(a.len(), b.len());
            for z in &b {
                assert!(a.iter().any(|x| x.chordal(z) < 1e-7));
            }
        }
    }

    #[test]
    fn full_grid_without_curves() {
        let q = instances::basilica_map();
        let curves = no_curves(&q, SpherePath::trivial(SpherePoint::real(5.0)));
        let index = CurveIndex::new(&curves, 0.1);
        let region = ChartRect::square(1.0);
        let m = build_mesh(&[region], &curves, &index, 0, 0.1, &MeshOptions { tube: None, seeds: vec![], critical: vec![], critical_radius: None }).unwrap();
        assert_eq!(m.len(), 21 * 21);
        assert_eq!(m.edges.len(), 2 * 21 * 20);
        assert_eq!(m.squares().len(), 400);
    }

    #[test]
    fn distant_segment_excludes_nothing() {
        let q = instances::basilica_map();
        let seg = SpherePath::new(vec![SpherePoint::real(2.0), SpherePoint::real(3.0)]).unwrap();
        let curves = no_curves(&q, seg);
        let index = CurveIndex::new(&curves, 0.1);
        let region = ChartRect::square(1.5);
        let m = build_mesh(&[region], &curves, &index, 0, 0.1, &MeshOptions { tube: None, seeds: vec![], critical: vec![], critical_radius: None }).unwrap();
        assert_eq!(m.len(), 31 * 31);
    }

    #[test]
    fn capture_mesh_avoids_sixteen_lifts() {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let curves = pullback_curves(&s.spec.q, &s.spec.paths(), 4, LiftOptions::default()).unwrap();
        assert_eq!(curves.generations[4].len(), 16);
        let index = CurveIndex::new(&curves, 0.05);
        let opts = MeshOptions::for_surgery(&s).unwrap();
        let m = build_mesh(&sphere_cover(), &curves, &index, 4, 0.01, &opts).unwrap();
        let full: usize = m.patches.iter().map(|p| p.nx * p.ny).sum();
        assert!(m.len() < full);
        for (k, p) in m.samples.iter().enumerate() {
            if !m.seeds.iter().any(|s| s.0 == k) {
                assert!(curves.distance_to(p, 4) > m.tube);
            }
        }
        for p in &opts.seeds {
            assert!(m.seeds.iter().any(|&(k, _)| m.samples[k] == *p));
        }
    }

    #[test]
    fn curve_index_matches_brute_force() {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let curves = pullback_curves(&s.spec.q, &s.spec.paths(), 3, LiftOptions::default()).unwrap();
        let index = CurveIndex::new(&curves, 0.05);
        for k in 0..200 {
            let z = C64::from_polar(0.2 + 0.02 * k as f64, 0.37 * k as f64);
            let p = SpherePoint::finite(z);
            let exact = curves.distance_to(&p, 3);
            let fast = index.distance(&p, 3, 0.2);
            if exact < 0.2 {
                assert!((fast - exact).abs() < 1e-3, "{p}: {fast} vs {exact}");
            } else {
                assert!(fast >= 0.2 - 1e-3);
            }
        }
    }

    #[test]
    fn trivial_surgery_gives_identity() {
        let s = instances::basilica_trivial().validate().unwrap();
        let run = run_pullback(&s, 5, 1e-12, Some(5), &ContinuationOptions::default()).unwrap();
        let stack = stack_for(&s, &run, 4, 0.1);
        for n in 0..=4 {
            let f = &stack.fields[n];
            assert_eq!(f.unassigned, 0);
            for (p, v) in stack.meshes[n].samples.iter().zip(&f.values) {
                assert!(p.chordal(v.as_ref().unwrap()) < 1e-12);
            }
            let r = semiconjugacy_residual(&stack, n).unwrap();
            assert!(r.exact_step < 1e-12 && r.limit < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn capture_fields_are_consistent() {
        let s = instances::basilica_capture(0.1).validate().unwrap();
        let run = run_pullback(&s, 60, 1e-9, None, &ContinuationOptions::default()).unwrap();
        let stack = stack_for(&s, &run, 6, 0.04);
        let mut limits = Vec::new();
        for n in 0..=6 {
            let f = &stack.fields[n];
            assert!(f.consistent() && f.max_defect < 1e-7 && f.max_margin < 0.3, "level {n}");
            for &k in &f.seeds {
                assert!(f.values[k].unwrap().chordal(&stack.meshes[n].samples[k]) < 1e-12);
            }
            let r = semiconjugacy_residual(&stack, n).unwrap();
            assert!(r.exact_step < 1e-8);
            limits.push(r.limit);
        }
        assert!(limits[6] < limits[4]);
    }

    #[test]
    fn decay_table_bounds() {
        let t = DecayTable { deltas: vec![1.0, 0.5, 0.25, 0.125], chordal: vec![], ratios: vec![0.5, 0.5, 0.5] };
        assert!(t.ratios_within(0.6, 0));
        assert!(!t.ratios_within(0.4, 0));
        assert!(t.tail_within(2.0, 1, 0.0));
        assert!(!t.tail_within(4.0, 0, 0.0));
    }
}

