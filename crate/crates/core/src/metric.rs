//! Böttcher charts at the postcritical points, an adapted expanding metric
//! near the Julia set, their blend, and Green functions of the basins.

use crate::rational::{MarkedPortrait, RationalError, RationalMap};
use crate::sphere::SpherePoint;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("point {0} is not in the postcritical set")]
    NotPostcritical(usize),
    #[error("cycle through point {0} contains no critical point")]
    NotSuperattracting(usize),
    #[error("chart at point {center}: residual {residual:.3e} at radius {radius:.3e}")]
    RadiusTooLarge { center: usize, radius: f64, residual: f64 },
    #[error("no expansion certificate with m ≤ {0}")]
    NotExpandingWithin(usize),
    #[error("cover gap at {0}")]
    CoverGap(String),
    #[error("buffer violation at {0}")]
    BufferViolation(String),
    #[error(transparent)]
    Rational(#[from] RationalError),
}

/// Truncated power series in one variable (ascending coefficients).
pub mod series {
    use super::C64;

    pub fn zero(n: usize) -> Vec<C64> {
        vec![C64::new(0.0, 0.0); n]
    }

    pub fn mul(a: &[C64], b: &[C64]) -> Vec<C64> {
        let n = a.len();
        let mut out = zero(n);
        for (i, x) in a.iter().enumerate() {
            if *x == C64::new(0.0, 0.0) {
                continue;
            }
            for (j, y) in b.iter().enumerate().take(n - i) {
                out[i + j] += x * y;
            }
        }
        out
    }

    pub fn powu(a: &[C64], k: usize) -> Vec<C64> {
        let mut out = zero(a.len());
        out[0] = C64::new(1.0, 0.0);
        for _ in 0..k {
            out = mul(&out, a);
        }
        out
    }

    /// `f ∘ g` for `g(0) = 0`.
    pub fn compose(f: &[C64], g: &[C64]) -> Vec<C64> {
        let n = f.len();
        let mut out = zero(n);
        // Horner in series arithmetic
        for c in f.iter().rev() {
            out = mul(&out, g);
            out[0] += c;
        }
        out
    }

    /// `num / den` with `den(0) ≠ 0`.
    pub fn divide(num: &[C64], den: &[C64], n: usize) -> Vec<C64> {
        let mut q = zero(n);
        for k in 0..n {
            let mut s = num.get(k).copied().unwrap_or_default();
            for j in 0..k {
                s -= q[j] * den.get(k - j).copied().unwrap_or_default();
            }
            q[k] = s / den[0];
        }
        q
    }

    /// `(1 + u)^p` for `u(0) = 0`.
    pub fn unit_power(u: &[C64], p: f64) -> Vec<C64> {
        let n = u.len();
        let mut w = zero(n);
        w[0] = C64::new(1.0, 0.0);
        for k in 1..n {
            let mut s = C64::new(0.0, 0.0);
            for j in 1..=k {
                s += u[j] * w[k - j] * (p * j as f64 - (k - j) as f64);
            }
            w[k] = s / k as f64;
        }
        w
    }

    /// `ν`-th root of a series vanishing to order exactly `ν`, with the
    /// leading coefficient's root chosen as `branch`.
    pub fn root(s: &[C64], nu: usize, branch: usize) -> Vec<C64> {
        let n = s.len();
        let lead = s[nu];
        let mut u = zero(n);
        for k in 1..n - nu {
            u[k] = s[nu + k] / lead;
        }
        let w = unit_power(&u, 1.0 / nu as f64);
        let alpha = C64::from_polar(
            lead.norm().powf(1.0 / nu as f64),
            (lead.arg() + 2.0 * std::f64::consts::PI * branch as f64) / nu as f64,
        );
        let mut out = zero(n);
        for k in 0..n - 1 {
            out[k + 1] = alpha * w[k];
        }
        out
    }

    pub fn eval(s: &[C64], z: C64) -> C64 {
        s.iter().rev().fold(C64::new(0.0, 0.0), |acc, c| acc * z + c)
    }

    pub fn eval_d(s: &[C64], z: C64) -> (C64, C64) {
        let mut f = C64::new(0.0, 0.0);
        let mut df = C64::new(0.0, 0.0);
        for c in s.iter().rev() {
            df = df * z + f;
            f = f * z + c;
        }
        (f, df)
    }

    /// Order of vanishing at 0 (first coefficient above `tol`).
    pub fn valuation(s: &[C64], tol: f64) -> usize {
        s.iter().position(|c| c.norm() > tol).unwrap_or(s.len())
    }
}

/// Map between centered charts, `C_{Rp} ∘ R ∘ C_p⁻¹`.
fn chart_map(r: &RationalMap, from: &SpherePoint, to: &SpherePoint) -> RationalMap {
    r.transform(&to.centered_chart(), &from.centered_chart().inverse())
}

fn taylor(f: &RationalMap, order: usize) -> Vec<C64> {
    let mut s = series::divide(f.numerator(), f.denominator(), order + 1);
    s[0] = C64::new(0.0, 0.0);
    s
}

/// Geometric mean of the local degrees over the cycle that `i` falls into.
pub fn cycle_expansion_rate(portrait: &MarkedPortrait, i: usize) -> f64 {
    let mut j = i;
    for _ in 0..portrait.len() {
        j = portrait.successor[j];
    }
    let p = portrait.period(j).unwrap();
    let mut prod = 1.0;
    let mut k = j;
    for _ in 0..p {
        prod *= portrait.local_degree[k] as f64;
        k = portrait.successor[k];
    }
    prod.powf(1.0 / p as f64)
}

/// Weights with `λ(R p) = E₁ λ(p) / ν(p)`, anchored at `anchor` on one point
/// of each cycle (the first critical one by index).
pub fn lambda_weights(portrait: &MarkedPortrait, anchor: f64) -> Vec<f64> {
    let n = portrait.len();
    let periodic = portrait.periodic();
    let mut lambda: Vec<Option<f64>> = vec![None; n];
    for i in 0..n {
        if !periodic[i] || lambda[i].is_some() {
            continue;
        }
        let mut cycle = vec![i];
        let mut j = portrait.successor[i];
        while j != i {
            cycle.push(j);
            j = portrait.successor[j];
        }
        let start = *cycle
            .iter()
            .filter(|&&k| portrait.local_degree[k] > 1)
            .min()
            .unwrap_or(cycle.iter().min().unwrap());
        let e1 = cycle_expansion_rate(portrait, start);
        let mut k = start;
        let mut l = anchor;
        for _ in 0..cycle.len() {
            lambda[k] = Some(l);
            l = e1 * l / portrait.local_degree[k] as f64;
            k = portrait.successor[k];
        }
    }
    // preperiodic points, solved backward from their images
    for _ in 0..n {
        for i in 0..n {
            if lambda[i].is_none() {
                if let Some(li) = lambda[portrait.successor[i]] {
                    let e1 = cycle_expansion_rate(portrait, i);
                    lambda[i] = Some(portrait.local_degree[i] as f64 * li / e1);
                }
            }
        }
    }
    lambda.into_iter().map(|l| l.unwrap()).collect()
}

/// A conjugating coordinate `ξ` near a postcritical point with
/// `ξ_{R p} ∘ R = ξ_p^ν`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoettcherChart {
    pub index: usize,
    pub center: SpherePoint,
    /// Radius in the centered chart coordinate.
    pub radius: f64,
    pub nu: usize,
    pub series: Vec<C64>,
    pub lambda: f64,
    pub periodic: bool,
    /// `V₁ = {|ξ| < level}` inside the chart disk.
    pub level: f64,
    /// Inner core `{|ξ| < core}` on which only the chart metric is used.
    pub core: Option<f64>,
    pub residual: f64,
}

impl BoettcherChart {
    pub fn zeta(&self, z: &SpherePoint) -> Option<C64> {
        self.center.centered_chart().apply(z).affine()
    }

    /// `ξ` at `z` when `z` lies in the chart disk.
    pub fn xi(&self, z: &SpherePoint) -> Option<C64> {
        let zeta = self.zeta(z)?;
        (zeta.norm() < self.radius).then(|| series::eval(&self.series, zeta))
    }

    pub fn in_v1(&self, z: &SpherePoint) -> bool {
        matches!(self.xi(z), Some(x) if x.norm() < self.level)
    }

    pub fn in_core(&self, z: &SpherePoint) -> bool {
        match (self.core, self.xi(z)) {
            (Some(c), Some(x)) => x.norm() < c,
            _ => false,
        }
    }

    /// `λ|ξ'|/|ξ|` as a density against the chordal metric.
    pub fn log_density(&self, z: &SpherePoint) -> Option<f64> {
        let zeta = self.zeta(z)?;
        if zeta.norm() >= self.radius {
            return None;
        }
        let (x, dx) = series::eval_d(&self.series, zeta);
        Some(self.lambda * dx.norm() / x.norm() * (1.0 + zeta.norm_sqr()) / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub order: usize,
    pub initial_radius: f64,
    pub residual_tol: f64,
    pub m_max: usize,
    pub samples: usize,
    pub seed: u64,
    /// Fixed core level for every periodic chart instead of the derived one.
    pub core_level: Option<f64>,
    /// Largest pullback depth tried when `g₀` cannot be certified outside
    /// the chart disks alone.
    pub max_pull_depth: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            order: 24,
            initial_radius: 0.5,
            residual_tol: 1e-8,
            m_max: 8,
            samples: 40_000,
            seed: 7,
            core_level: None,
            max_pull_depth: 12,
        }
    }
}

fn cycle_of(portrait: &MarkedPortrait, i: usize) -> Vec<usize> {
    let mut c = vec![i];
    let mut j = portrait.successor[i];
    while j != i {
        c.push(j);
        j = portrait.successor[j];
    }
    c
}

/// Böttcher series at every postcritical point (radius not yet chosen).
fn chart_series(
    r: &RationalMap,
    portrait: &MarkedPortrait,
    order: usize,
) -> Result<Vec<Vec<C64>>, MetricError> {
    let n = portrait.len();
    let pts = &portrait.points;
    let local: Vec<Vec<C64>> = (0..n)
        .map(|i| taylor(&chart_map(r, &pts[i], &pts[portrait.successor[i]]), order))
        .collect();
    let periodic = portrait.periodic();
    let mut xi: Vec<Option<Vec<C64>>> = vec![None; n];
    let len = order + 1;
    for i in 0..n {
        if !periodic[i] || xi[i].is_some() {
            continue;
        }
        let cycle = cycle_of(portrait, i);
        let nu: usize = cycle.iter().map(|&k| portrait.local_degree[k]).product();
        if nu < 2 {
            return Err(MetricError::NotSuperattracting(i));
        }
        // start at a critical point of the cycle
        let rot = cycle.iter().position(|&k| portrait.local_degree[k] > 1).unwrap();
        let cycle: Vec<usize> = cycle[rot..].iter().chain(&cycle[..rot]).copied().collect();
        let mut ret = local[cycle[0]].clone();
        for &k in &cycle[1..] {
            ret = series::compose(&local[k], &ret);
        }
        // ξ(ζ) = b ζ h(ζ) with b^{ν−1} = leading coefficient of the return map
        let c = ret[nu];
        let b = C64::from_polar(c.norm().powf(1.0 / (nu - 1) as f64), c.arg() / (nu - 1) as f64);
        let mut g = series::zero(len);
        for k in 0..len - nu {
            g[k] = ret[nu + k] / c;
        }
        let mut h = series::zero(len);
        h[0] = C64::new(1.0, 0.0);
        for k in 1..len {
            // g · h∘ret = h^ν, whose ζ^k coefficient is linear in h_k with slope ν
            let lhs = series::mul(&g, &series::compose(&h, &ret));
            let rhs = series::powu(&h, nu);
            h[k] += (lhs[k] - rhs[k]) / nu as f64;
        }
        let mut x0 = series::zero(len);
        for k in 0..len - 1 {
            x0[k + 1] = b * h[k];
        }
        // transport backward: ξ_k = (ξ_{next} ∘ F_k)^{1/ν_k}
        let m = cycle.len();
        let mut best: Option<(f64, Vec<Vec<C64>>)> = None;
        let choices: usize = cycle[1..].iter().map(|&k| portrait.local_degree[k]).product();
        for code in 0..choices.max(1) {
            let mut rest = code;
            let mut chain: Vec<Vec<C64>> = vec![series::zero(len); m];
            chain[0] = x0.clone();
            let mut next = x0.clone();
            for pos in (1..m).rev() {
                let k = cycle[pos];
                let nk = portrait.local_degree[k];
                let branch = rest % nk;
                rest /= nk;
                let comp = series::compose(&next, &local[k]);
                chain[pos] = if nk == 1 { comp } else { series::root(&comp, nk, branch) };
                next = chain[pos].clone();
            }
            // closure at the start: ξ_1 ∘ F_0 = ξ_0^{ν_0}
            let lhs = series::compose(if m > 1 { &chain[1] } else { &chain[0] }, &local[cycle[0]]);
            let rhs = series::powu(&chain[0], portrait.local_degree[cycle[0]]);
            let defect = (0..len.min(6)).map(|k| (lhs[k] - rhs[k]).norm()).fold(0.0, f64::max);
            if best.as_ref().is_none_or(|(d, _)| defect < *d) {
                best = Some((defect, chain));
            }
        }
        let (_, chain) = best.unwrap();
        for (pos, &k) in cycle.iter().enumerate() {
            xi[k] = Some(chain[pos].clone());
        }
    }
    for _ in 0..n {
        for i in 0..n {
            if xi[i].is_none() {
                if let Some(next) = xi[portrait.successor[i]].clone() {
                    let comp = series::compose(&next, &local[i]);
                    let nk = portrait.local_degree[i];
                    xi[i] = Some(if nk == 1 { comp } else { series::root(&comp, nk, 0) });
                }
            }
        }
    }
    Ok(xi.into_iter().map(|x| x.unwrap()).collect())
}

/// Sup of `|ξ_{Rp}(R z) − ξ_p(z)^ν|` on the annulus `radius/2 ≤ |ζ| ≤ radius`,
/// or `None` if the image leaves the downstream chart disk.
fn chart_residual(
    r: &RationalMap,
    portrait: &MarkedPortrait,
    xi: &[Vec<C64>],
    radii: &[f64],
    i: usize,
) -> Option<f64> {
    let j = portrait.successor[i];
    let f = chart_map(r, &portrait.points[i], &portrait.points[j]);
    let nu = portrait.local_degree[i] as i32;
    let mut worst: f64 = 0.0;
    for ring in 0..4 {
        let rad = radii[i] * (0.5 + 0.5 * ring as f64 / 3.0);
        for a in 0..96 {
            let zeta = C64::from_polar(rad, 2.0 * PI * a as f64 / 96.0);
            let w = f.eval_affine(zeta);
            if !(w.norm() < radii[j]) {
                return None;
            }
            let lhs = series::eval(&xi[j], w);
            let rhs = series::eval(&xi[i], zeta).powi(nu);
            worst = worst.max((lhs - rhs).norm());
        }
    }
    Some(worst)
}

/// Charts at every postcritical point with radii shrunk until the
/// functional equation holds to `residual_tol`, and forward-invariant levels.
pub fn boettcher_charts(
    r: &RationalMap,
    portrait: &MarkedPortrait,
    opts: &MetricOptions,
) -> Result<Vec<BoettcherChart>, MetricError> {
    let n = portrait.len();
    let xi = chart_series(r, portrait, opts.order)?;
    // keep the chart disks disjoint
    let mut radii: Vec<f64> = (0..n)
        .map(|i| {
            let sep = (0..n)
                .filter(|&j| j != i)
                .map(|j| portrait.points[i].chordal(&portrait.points[j]))
                .fold(2.0, f64::min);
            // chordal radius 2s/√(1+s²) of a chart disk of radius s
            let s = 0.45 * sep / (4.0 - (0.45 * sep).powi(2)).sqrt();
            opts.initial_radius.min(s)
        })
        .collect();
    let mut residuals = vec![0.0; n];
    for _ in 0..200 {
        let mut changed = false;
        for i in 0..n {
            match chart_residual(r, portrait, &xi, &radii, i) {
                Some(res) if res < opts.residual_tol => residuals[i] = res,
                other => {
                    radii[i] *= 0.85;
                    changed = true;
                    if radii[i] < 1e-3 {
                        return Err(MetricError::RadiusTooLarge {
                            center: i,
                            radius: radii[i],
                            residual: other.unwrap_or(f64::INFINITY),
                        });
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let lambda = lambda_weights(portrait, 1.0);
    let periodic = portrait.periodic();
    // 0.9 × min |ξ| on the chart circle, and a single zero inside
    let mut bound = vec![0.0; n];
    for i in 0..n {
        let mut m = f64::INFINITY;
        let mut winding = 0.0;
        let k = 512;
        let mut prev = series::eval(&xi[i], C64::new(radii[i], 0.0));
        for a in 1..=k {
            let v = series::eval(&xi[i], C64::from_polar(radii[i], 2.0 * PI * a as f64 / k as f64));
            m = m.min(v.norm());
            winding += (v / prev).arg();
            prev = v;
        }
        if (winding / (2.0 * PI) - 1.0).abs() > 0.1 {
            return Err(MetricError::RadiusTooLarge {
                center: i,
                radius: radii[i],
                residual: winding / (2.0 * PI),
            });
        }
        bound[i] = 0.9 * m;
    }
    let mut level: Vec<Option<f64>> = vec![None; n];
    for i in 0..n {
        if periodic[i] && level[i].is_none() {
            let cycle = cycle_of(portrait, i);
            let l = cycle.iter().map(|&k| bound[k]).fold(0.9, f64::min);
            for k in cycle {
                level[k] = Some(l);
            }
        }
    }
    for _ in 0..n {
        for i in 0..n {
            if level[i].is_none() {
                if let Some(lj) = level[portrait.successor[i]] {
                    level[i] = Some(bound[i].min(lj.powf(1.0 / portrait.local_degree[i] as f64)));
                }
            }
        }
    }
    let level: Vec<f64> = level.into_iter().map(|l| l.unwrap()).collect();
    let core: Vec<Option<f64>> = (0..n)
        .map(|i| {
            if !periodic[i] {
                return None;
            }
            if let Some(c) = opts.core_level {
                return Some(c);
            }
            (0..n)
                .filter(|&q| portrait.successor[q] == i)
                .map(|q| (0.5 * level[q]).powi(portrait.local_degree[q] as i32))
                .reduce(f64::min)
        })
        .collect();
    Ok((0..n)
        .map(|i| BoettcherChart {
            index: i,
            center: portrait.points[i],
            radius: radii[i],
            nu: portrait.local_degree[i],
            series: xi[i].clone(),
            lambda: lambda[i],
            periodic: periodic[i],
            level: level[i],
            core: core[i],
            residual: residuals[i],
        })
        .collect())
}

/// The chart at one postcritical point.
pub fn boettcher_chart(
    r: &RationalMap,
    portrait: &MarkedPortrait,
    center: usize,
    opts: &MetricOptions,
) -> Result<BoettcherChart, MetricError> {
    if center >= portrait.len() {
        return Err(MetricError::NotPostcritical(center));
    }
    Ok(boettcher_charts(r, portrait, opts)?.swap_remove(center))
}

/// Parameters of `g₀ = max_{i<m} θ^{−i} |D R^i|` (spherical).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JuliaParams {
    pub m: usize,
    pub theta: f64,
    /// Points whose orbit enters a chart level set within this many steps
    /// carry the pulled-back chart metric, and `g₀` is only certified on
    /// points that take longer.
    #[serde(default)]
    pub pull_depth: usize,
}

/// `|D R^j(z)|` for `j = 0..=m`.
fn derivative_chain(r: &RationalMap, z: &SpherePoint, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m + 1);
    let mut acc = 1.0;
    let mut x = *z;
    out.push(acc);
    for _ in 0..m {
        acc *= r.spherical_derivative(&x);
        x = r.evaluate(&x);
        out.push(acc);
    }
    out
}

fn g0_density(r: &RationalMap, julia: &JuliaParams, z: &SpherePoint) -> f64 {
    derivative_chain(r, z, julia.m - 1)
        .iter()
        .enumerate()
        .map(|(i, d)| d / julia.theta.powi(i as i32))
        .fold(0.0, f64::max)
}

fn random_sphere_point(rng: &mut ChaCha8Rng) -> SpherePoint {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0f64..1.0),
        ];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-6 && n2 <= 1.0 {
            return SpherePoint::from_xyz(&v);
        }
    }
}

fn sphere_samples(n: usize, seed: u64) -> Vec<SpherePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_sphere_point(&mut rng)).collect()
}

fn in_any_v1(charts: &[BoettcherChart], z: &SpherePoint) -> bool {
    charts.iter().any(|c| c.in_v1(z))
}

/// Smallest `m ≤ m_max` for which every sampled `z` with `z, R z ∉ V₁` has
/// `max_{1≤j≤m} |D R^j(z)|^{1/j} > 1`; `θ` is the sampled minimum of that
/// maximum, so `g₀(D R v) ≥ θ g₀(v)` holds there by shifting the index.
pub fn adapted_julia_metric(
    r: &RationalMap,
    charts: &[BoettcherChart],
    opts: &MetricOptions,
) -> Result<JuliaParams, MetricError> {
    adapted_julia_metric_at(r, charts, opts, 0)
}

/// As [`adapted_julia_metric`], certifying only points whose first
/// `pull_depth + 2` orbit points avoid the chart level sets.
pub fn adapted_julia_metric_at(
    r: &RationalMap,
    charts: &[BoettcherChart],
    opts: &MetricOptions,
    pull_depth: usize,
) -> Result<JuliaParams, MetricError> {
    let samples: Vec<SpherePoint> = sphere_samples(opts.samples, opts.seed)
        .into_par_iter()
        .filter(|z| {
            let mut x = *z;
            for _ in 0..pull_depth + 2 {
                if in_any_v1(charts, &x) {
                    return false;
                }
                x = r.evaluate(&x);
            }
            true
        })
        .collect();
    let chains: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|z| derivative_chain(r, z, opts.m_max))
        .collect();
    for m in 1..=opts.m_max {
        let theta = chains
            .iter()
            .map(|c| (1..=m).map(|j| c[j].powf(1.0 / j as f64)).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        if theta > 1.0 && theta.is_finite() {
            return Ok(JuliaParams { m, theta, pull_depth });
        }
    }
    Err(MetricError::NotExpandingWithin(opts.m_max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Near the Julia set only (`V₀ − V₁`).
    Outer,
    /// `V₀ ∩ V₁`.
    Overlap(usize),
    /// `V₁ − V₀`.
    Core(usize),
    Postcritical(usize),
    /// Outside the chart disks, entering the level set of this chart within
    /// the pullback depth; part of the overlap.
    Pulled(usize),
}

/// The blended metric `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandingMetric {
    pub map: RationalMap,
    pub charts: Vec<BoettcherChart>,
    pub julia: JuliaParams,
    pub epsilon: f64,
    /// `E₁` per postcritical point.
    pub cycle_rates: Vec<f64>,
    pub expansion: f64,
}

impl ExpandingMetric {
    pub fn region(&self, z: &SpherePoint) -> Region {
        for c in &self.charts {
            if c.center.chordal(z) < 1e-12 {
                return Region::Postcritical(c.index);
            }
        }
        for c in &self.charts {
            if c.in_core(z) {
                return Region::Core(c.index);
            }
            if c.in_v1(z) {
                return Region::Overlap(c.index);
            }
        }
        match self.entry(z) {
            Some((i, _)) => Region::Pulled(i),
            None => Region::Outer,
        }
    }

    /// For `z` outside the level sets whose orbit enters the level set of
    /// chart `i` after `k ≤ pull_depth` steps: `i` and the pulled-back chart
    /// density `|D R^k(z)| g₁(R^k z) / E₁^k`.
    fn entry(&self, z: &SpherePoint) -> Option<(usize, f64)> {
        let mut x = *z;
        let mut deriv = 1.0;
        for k in 1..=self.julia.pull_depth {
            deriv *= self.map.spherical_derivative(&x);
            x = self.map.evaluate(&x);
            if let Some(c) = self.charts.iter().find(|c| c.in_v1(&x)) {
                let g1 = c.log_density(&x)?;
                return Some((c.index, deriv * g1 / self.cycle_rates[c.index].powi(k as i32)));
            }
        }
        None
    }

    /// The `g₁` part of the density, chart or pulled back.
    fn g1(&self, z: &SpherePoint) -> Option<(usize, f64)> {
        for c in &self.charts {
            if c.in_v1(z) {
                return Some((c.index, c.log_density(z)?));
            }
        }
        self.entry(z)
    }

    pub fn g0(&self, z: &SpherePoint) -> f64 {
        g0_density(&self.map, &self.julia, z)
    }

    /// Density of `g` against the chordal metric (conformal, so one number
    /// per point); infinite on the postcritical set.
    pub fn density(&self, z: &SpherePoint) -> f64 {
        match self.region(z) {
            Region::Postcritical(_) => f64::INFINITY,
            Region::Outer => self.epsilon * self.g0(z),
            Region::Core(i) => self.charts[i].log_density(z).unwrap(),
            Region::Overlap(i) => self.epsilon * self.g0(z) + self.charts[i].log_density(z).unwrap(),
            Region::Pulled(_) => self.epsilon * self.g0(z) + self.entry(z).unwrap().1,
        }
    }

    /// `g(D R v) / g(v)` at `z`.
    pub fn ratio(&self, z: &SpherePoint) -> f64 {
        let w = self.map.evaluate(z);
        self.density(&w) * self.map.spherical_derivative(z) / self.density(z)
    }

    /// Chordal-length integral of the density along a geodesic segment.
    pub fn length(&self, a: &SpherePoint, b: &SpherePoint, steps: usize) -> f64 {
        let (xa, xb) = (a.to_xyz(), b.to_xyz());
        let chord = a.chordal(b);
        let ang = 2.0 * (chord / 2.0).min(1.0).asin();
        let h = 1.0 / steps as f64;
        (0..steps)
            .map(|k| {
                let p = SpherePoint::from_xyz(&crate::sphere::slerp(&xa, &xb, (k as f64 + 0.5) * h));
                self.density(&p) * ang * h
            })
            .sum()
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            m: self.julia.m,
            theta: self.julia.theta,
            cycle_rates: self.cycle_rates.clone(),
            lambda: self.charts.iter().map(|c| c.lambda).collect(),
            radii: self.charts.iter().map(|c| c.radius).collect(),
            chart_residual: self.charts.iter().map(|c| c.residual).fold(0.0, f64::max),
            epsilon: self.epsilon,
            pull_depth: self.julia.pull_depth,
            expansion: self.expansion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub m: usize,
    pub theta: f64,
    pub cycle_rates: Vec<f64>,
    pub lambda: Vec<f64>,
    pub radii: Vec<f64>,
    pub chart_residual: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub pull_depth: usize,
    pub expansion: f64,
}

fn chart_disk_samples(c: &BoettcherChart, n: usize, rng: &mut ChaCha8Rng) -> Vec<SpherePoint> {
    let inv = c.center.centered_chart().inverse();
    (0..n)
        .map(|_| {
            let rad = c.radius * rng.gen_range(0.0f64..1.0).sqrt();
            let zeta = C64::from_polar(rad, rng.gen_range(0.0..2.0 * PI));
            inv.apply(&SpherePoint::finite(zeta))
        })
        .collect()
}

/// Assembles `g` from the charts and `g₀`, choosing `ε` so that the overlap
/// and the entry into `V₁` both keep the expansion factor.
pub fn blend(
    r: &RationalMap,
    portrait: &MarkedPortrait,
    charts: Vec<BoettcherChart>,
    julia: JuliaParams,
    opts: &MetricOptions,
) -> Result<ExpandingMetric, MetricError> {
    let n = portrait.len();
    for c in &charts {
        if let Some(core) = c.core {
            if core >= c.level {
                return Err(MetricError::CoverGap(format!(
                    "core level {core:.3e} of chart {} reaches its outer level {:.3e}",
                    c.index, c.level
                )));
            }
        }
    }
    let cycle_rates: Vec<f64> = (0..n).map(|i| cycle_expansion_rate(portrait, i)).collect();
    let sqrt_e1 = cycle_rates.iter().fold(f64::INFINITY, |a, &b| a.min(b)).sqrt();
    let expansion = julia.theta.min(sqrt_e1);
    let mut metric = ExpandingMetric {
        map: r.clone(),
        charts,
        julia,
        epsilon: 1.0,
        cycle_rates: cycle_rates.clone(),
        expansion,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let per_chart = opts.samples / (4 * n).max(1);
    let mut overlap = Vec::new();
    let mut entry = Vec::new();
    for c in &metric.charts {
        for z in chart_disk_samples(c, per_chart, &mut rng) {
            if let Region::Overlap(i) = metric.region(&z) {
                overlap.push((z, i));
            }
            // points entering V₁ from outside
            if c.in_v1(&z) {
                for (y, _) in r.preimages(&z)? {
                    if metric.region(&y) == Region::Outer {
                        entry.push(y);
                    }
                }
            }
        }
    }
    for z in sphere_samples(opts.samples / 4, opts.seed ^ 0xe47) {
        let here = metric.region(&z);
        if let Region::Pulled(i) = here {
            overlap.push((z, i));
        }
        if here == Region::Outer && metric.region(&r.evaluate(&z)) != Region::Outer {
            entry.push(z);
        }
    }
    // buffer: nothing outside V₁ maps into a core
    for z in &entry {
        let w = r.evaluate(z);
        if let Region::Core(i) = metric.region(&w) {
            return Err(MetricError::BufferViolation(format!(
                "{z} maps into the core of chart {i}"
            )));
        }
    }
    let mut eps = f64::INFINITY;
    for (z, i) in &overlap {
        let Some((_, g1)) = metric.g1(z) else { continue };
        eps = eps.min((cycle_rates[*i].sqrt() - 1.0) * g1 / metric.g0(z));
    }
    for z in &entry {
        let w = r.evaluate(z);
        let Some((_, g1)) = metric.g1(&w) else { continue };
        let val = g1 * r.spherical_derivative(z) / (expansion * metric.g0(z));
        if val.is_finite() {
            eps = eps.min(val);
        }
    }
    if !eps.is_finite() || eps <= 0.0 {
        return Err(MetricError::CoverGap("no admissible blend weight".into()));
    }
    metric.epsilon = 0.9 * eps;
    Ok(metric)
}

/// Charts, `g₀` and blend in one call.
pub fn build_metric(
    r: &RationalMap,
    portrait: &MarkedPortrait,
    opts: &MetricOptions,
) -> Result<ExpandingMetric, MetricError> {
    let charts = boettcher_charts(r, portrait, opts)?;
    let mut depth = 0;
    let julia = loop {
        match adapted_julia_metric_at(r, &charts, opts, depth) {
            Err(MetricError::NotExpandingWithin(_)) if depth < opts.max_pull_depth => depth += 1,
            other => break other?,
        }
    };
    blend(r, portrait, charts, julia, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub samples: usize,
    pub min_ratio: f64,
    /// Minimum ratio by (source region, target region) class:
    /// outer→any, overlap→overlap, overlap→core, core→any.
    pub regimes: [f64; 4],
    pub ratios: Vec<f64>,
}

/// Monte-Carlo check of `g(D R v) ≥ E g(v)` on uniform sphere samples.
pub fn verify_expansion(metric: &ExpandingMetric, samples: usize, seed: u64) -> ExpansionReport {
    let pts = sphere_samples(samples, seed);
    let out: Vec<(f64, usize)> = pts
        .par_iter()
        .filter_map(|z| {
            let src = metric.region(z);
            if matches!(src, Region::Postcritical(_)) {
                return None;
            }
            let w = metric.map.evaluate(z);
            let dst = metric.region(&w);
            if matches!(dst, Region::Postcritical(_)) {
                return None;
            }
            let class = match (src, dst) {
                (Region::Outer, _) => 0,
                (Region::Overlap(_) | Region::Pulled(_), Region::Core(_)) => 2,
                (Region::Overlap(_) | Region::Pulled(_), _) => 1,
                _ => 3,
            };
            Some((metric.ratio(z), class))
        })
        .collect();
    let mut regimes = [f64::INFINITY; 4];
    for (r, c) in &out {
        regimes[*c] = regimes[*c].min(*r);
    }
    ExpansionReport {
        samples: out.len(),
        min_ratio: out.iter().map(|x| x.0).fold(f64::INFINITY, f64::min),
        regimes,
        ratios: out.into_iter().map(|x| x.0).collect(),
    }
}

/// Rescaling used when an orbit reaches a chart after `n` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GreenScaling {
    /// Divide by the degree of `R` on each Fatou component along the orbit.
    #[default]
    ComponentDegree,
    /// Divide by `dⁿ`.
    GlobalDegree,
}

/// Degree of `R` on the Fatou component of each orbit point, found by
/// lifting a path from the entry point to the chart center back along the
/// orbit and reading the local degree at the lifted center.
fn component_degrees(
    r: &RationalMap,
    orbit: &[SpherePoint],
    chart: &BoettcherChart,
) -> Result<Vec<usize>, RationalError> {
    let n = orbit.len() - 1;
    let inv = chart.center.centered_chart().inverse();
    let zeta = chart.zeta(&orbit[n]).unwrap();
    let steps = 48;
    let mut path: Vec<SpherePoint> = (0..=steps)
        .map(|k| inv.apply(&SpherePoint::finite(zeta * (1.0 - k as f64 / steps as f64))))
        .collect();
    let mut degrees = vec![1; n];
    for i in (0..n).rev() {
        let mut lifted = vec![orbit[i]];
        for p in &path[1..] {
            let prev = *lifted.last().unwrap();
            let next = r
                .preimages(p)?
                .into_iter()
                .map(|(q, _)| q)
                .min_by(|a, b| a.chordal(&prev).partial_cmp(&b.chordal(&prev)).unwrap())
                .unwrap();
            lifted.push(next);
        }
        degrees[i] = r.local_degree(lifted.last().unwrap())?;
        path = lifted;
    }
    Ok(degrees)
}

/// Green function of the superattracting basins: `−log|ξ|` in the charts,
/// extended by the functional equation; 0 if the orbit never reaches a chart.
pub fn green_function(
    metric: &ExpandingMetric,
    z: &SpherePoint,
    max_iter: usize,
    scaling: GreenScaling,
) -> Result<f64, MetricError> {
    let r = &metric.map;
    let mut orbit = vec![*z];
    for _ in 0..=max_iter {
        let x = *orbit.last().unwrap();
        if let Some(c) = metric.charts.iter().find(|c| c.in_v1(&x)) {
            if c.center.chordal(&x) < 1e-300 {
                return Ok(f64::INFINITY);
            }
            let g = -c.xi(&x).unwrap().norm().ln();
            let n = orbit.len() - 1;
            if n == 0 {
                return Ok(g);
            }
            let scale = match scaling {
                GreenScaling::GlobalDegree => (r.degree() as f64).powi(n as i32),
                GreenScaling::ComponentDegree => component_degrees(r, &orbit, c)?
                    .iter()
                    .map(|&d| d as f64)
                    .product(),
            };
            return Ok(g / scale);
        }
        orbit.push(r.evaluate(&x));
    }
    Ok(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{postcritical_analysis, RECURRENCE_TOLERANCE};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn sq() -> RationalMap {
        RationalMap::from_real(&[0.0, 0.0, 1.0], &[1.0]).unwrap()
    }

    fn basilica() -> RationalMap {
        RationalMap::from_real(&[-1.0, 0.0, 1.0], &[1.0]).unwrap()
    }

    fn capture_limit() -> RationalMap {
        RationalMap::from_real(&[-2.0, 0.0, 2.0], &[2.0, 0.0, 1.0]).unwrap()
    }

    fn portrait(r: &RationalMap) -> MarkedPortrait {
        postcritical_analysis(r, 100, RECURRENCE_TOLERANCE).unwrap()
    }

    #[test]
    fn series_root_and_power_agree() {
        let s = vec![c(0.0, 0.0), c(0.0, 0.0), c(2.0, 1.0), c(0.3, 0.0), c(0.1, -0.2), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        let r = series::root(&s, 2, 0);
        let back = series::powu(&r, 2);
        for k in 0..s.len() {
            assert!((back[k] - s[k]).norm() < 1e-14);
        }
    }

    #[test]
    fn expansion_rates_and_weights() {
        let p = portrait(&basilica());
        let i0 = p.index_of(&SpherePoint::real(0.0), 1e-9).unwrap();
        let im = p.index_of(&SpherePoint::real(-1.0), 1e-9).unwrap();
        let ii = p.index_of(&SpherePoint::infinity(), 1e-9).unwrap();
        assert!((cycle_expansion_rate(&p, i0) - 2.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(cycle_expansion_rate(&p, ii), 2.0);
        let l = lambda_weights(&p, 1.0);
        assert_eq!(l[i0], 1.0);
        assert!((l[im] - 0.5_f64.sqrt()).abs() < 1e-15);
        // closure around the cycle
        let e1 = 2.0_f64.sqrt();
        assert!((e1 * (e1 * l[i0] / 2.0) / 1.0 - l[i0]).abs() < 1e-12);
        let l5 = lambda_weights(&p, 5.0);
        for k in 0..p.len() {
            assert!((l5[k] - 5.0 * l[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn square_chart_is_identity() {
        let r = sq();
        let p = portrait(&r);
        let i0 = p.index_of(&SpherePoint::real(0.0), 1e-9).unwrap();
        let ch = boettcher_chart(&r, &p, i0, &MetricOptions::default()).unwrap();
        assert_eq!(ch.nu, 2);
        assert!((ch.series[1] - c(1.0, 0.0)).norm() < 1e-14);
        assert!(ch.series[2..].iter().all(|x| x.norm() < 1e-14));
        assert!(ch.residual < 1e-12);
    }

    #[test]
    fn basilica_chart_transport() {
        let r = basilica();
        let p = portrait(&r);
        let charts = boettcher_charts(&r, &p, &MetricOptions::default()).unwrap();
        let i0 = p.index_of(&SpherePoint::real(0.0), 1e-9).unwrap();
        let im = p.index_of(&SpherePoint::real(-1.0), 1e-9).unwrap();
        for ch in &charts {
            assert!(ch.residual < 1e-8);
        }
        // ξ₋₁ = ξ₀ ∘ R near −1
        let z = SpherePoint::real(-1.0 + 0.01);
        let lhs = charts[im].xi(&z).unwrap();
        let rz = r.evaluate(&z);
        let rhs = charts[i0].xi(&rz).unwrap();
        assert!((lhs - rhs).norm() < 1e-8);
        // R² ≈ −2z² at 0, so the leading coefficient of ξ₀ is −2
        assert!((charts[i0].series[1] - c(-2.0, 0.0)).norm() < 1e-10);
    }

    #[test]
    fn index_out_of_range_rejected() {
        let r = sq();
        let p = portrait(&r);
        assert_eq!(
            boettcher_chart(&r, &p, 7, &MetricOptions::default()),
            Err(MetricError::NotPostcritical(7))
        );
    }

    #[test]
    fn square_annulus_expansion_spot_values() {
        let r = sq();
        assert!((r.spherical_derivative(&SpherePoint::finite(C64::from_polar(1.0, 0.7))) - 2.0).abs() < 1e-14);
        let mut worst = f64::INFINITY;
        for k in 0..200 {
            let rad = 0.8 + 0.45 * k as f64 / 199.0;
            let d = r.spherical_derivative(&SpherePoint::real(rad));
            let expected = 2.0 * rad * (1.0 + rad * rad) / (1.0 + rad.powi(4));
            assert!((d - expected).abs() < 1e-13);
            worst = worst.min(d);
        }
        assert!(worst >= 1.2);
    }

    #[test]
    fn square_metric_expands() {
        let r = sq();
        let p = portrait(&r);
        let m = build_metric(&r, &p, &MetricOptions::default()).unwrap();
        assert!(m.julia.theta > 1.0);
        assert!((m.expansion - m.julia.theta.min(2.0_f64.sqrt())).abs() < 1e-15);
        let rep = verify_expansion(&m, 20_000, 3);
        assert!(rep.min_ratio >= m.expansion - 0.05, "{rep:?}");
        // in a core the ratio is E₁ = 2
        let z = SpherePoint::finite(C64::from_polar(0.01, 0.3));
        assert!(matches!(m.region(&z), Region::Core(_)));
        assert!((m.ratio(&z) - 2.0).abs() < 1e-10);
    }

    #[test]
    fn capture_limit_metric_expands() {
        let r = capture_limit();
        let p = portrait(&r);
        assert_eq!(p.len(), 4);
        let m = build_metric(&r, &p, &MetricOptions::default()).unwrap();
        let rep = verify_expansion(&m, 20_000, 5);
        let target = m.julia.theta.min(2.0_f64.powf(0.25));
        assert!((m.expansion - target).abs() < 1e-15);
        assert!(rep.min_ratio >= target - 0.05, "{:?}", m.summary());
    }

    #[test]
    fn basilica_metric_needs_pullback() {
        let r = crate::surgery::instances::basilica_map();
        let p = portrait(&r);
        let opts = MetricOptions::default();
        let charts = boettcher_charts(&r, &p, &opts).unwrap();
        assert!(matches!(adapted_julia_metric(&r, &charts, &opts), Err(MetricError::NotExpandingWithin(_))));
        let m = build_metric(&r, &p, &opts).unwrap();
        assert!(m.julia.pull_depth > 0);
        let rep = verify_expansion(&m, 20_000, 5);
        assert!(rep.min_ratio >= m.expansion - 0.05, "{:?}", m.summary());
        let pulled = (0..400)
            .map(|k| SpherePoint::finite(C64::from_polar(0.02 * k as f64, 0.7 * k as f64)))
            .filter(|z| matches!(m.region(z), Region::Pulled(_)))
            .count();
        assert!(pulled > 0);
    }

    #[test]
    fn oversized_core_is_a_cover_gap() {
        let r = sq();
        let p = portrait(&r);
        let opts = MetricOptions { core_level: Some(0.99), ..Default::default() };
        let charts = boettcher_charts(&r, &p, &opts).unwrap();
        let julia = adapted_julia_metric(&r, &charts, &opts).unwrap();
        assert!(matches!(blend(&r, &p, charts, julia, &opts), Err(MetricError::CoverGap(_))));
    }

    #[test]
    fn square_green_function() {
        let r = sq();
        let p = portrait(&r);
        let m = build_metric(&r, &p, &MetricOptions::default()).unwrap();
        let g2 = green_function(&m, &SpherePoint::real(2.0), 200, GreenScaling::ComponentDegree).unwrap();
        assert!((g2 - 2.0_f64.ln()).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let z = SpherePoint::finite(C64::from_polar(rng.gen_range(1.05..4.0), rng.gen_range(0.0..6.3)));
            let g = green_function(&m, &z, 200, GreenScaling::ComponentDegree).unwrap();
            let gr = green_function(&m, &r.evaluate(&z), 200, GreenScaling::ComponentDegree).unwrap();
            assert!((gr - 2.0 * g).abs() < 1e-8);
            let gg = green_function(&m, &z, 200, GreenScaling::GlobalDegree).unwrap();
            assert!((gg - g).abs() < 1e-10);
        }
        let on_circle = SpherePoint::finite(C64::from_polar(1.0, 1.0));
        assert_eq!(green_function(&m, &on_circle, 50, GreenScaling::ComponentDegree).unwrap(), 0.0);
    }
}
