//! Rational self-maps of the sphere in homogeneous coefficient form.

use crate::sphere::{MobiusMap, SpherePoint};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Chordal separation under which roots are merged into one multiple root.
pub const CLUSTER_TOLERANCE: f64 = 1e-7;
/// Default recurrence tolerance for postcritical orbits.
pub const RECURRENCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RationalError {
    #[error("degenerate map: numerator and denominator share a root (separation {0:.3e})")]
    DegenerateMap(f64),
    #[error("degree {0} too low for this operation")]
    DegreeTooLow(usize),
    #[error("root finding failed to converge (residual {residual:.3e})")]
    RootFindFailure { residual: f64 },
    #[error("critical orbits not finite within {0} iterations")]
    NotFiniteWithin(usize),
    #[error("ambiguous collision of orbit points at separation {0:.3e}")]
    AmbiguousCollision(f64),
    #[error("hyperbolicity inconclusive: {0}")]
    Inconclusive(String),
}

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

fn one() -> C64 {
    C64::new(1.0, 0.0)
}

/// Ascending-power polynomial helpers.
pub mod poly {
    use super::*;

    pub fn eval(p: &[C64], z: C64) -> C64 {
        p.iter().rev().fold(zero(), |acc, c| acc * z + c)
    }

    /// Value and first derivative.
    pub fn eval_d(p: &[C64], z: C64) -> (C64, C64) {
        let mut f = zero();
        let mut df = zero();
        for c in p.iter().rev() {
            df = df * z + f;
            f = f * z + c;
        }
        (f, df)
    }

    pub fn derivative(p: &[C64]) -> Vec<C64> {
        if p.len() <= 1 {
            return vec![zero()];
        }
        p.iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| c * k as f64)
            .collect()
    }

    pub fn mul(a: &[C64], b: &[C64]) -> Vec<C64> {
        let mut out = vec![zero(); a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    pub fn add(a: &[C64], b: &[C64]) -> Vec<C64> {
        let n = a.len().max(b.len());
        (0..n)
            .map(|k| a.get(k).copied().unwrap_or_default() + b.get(k).copied().unwrap_or_default())
            .collect()
    }

    pub fn scale(a: &[C64], s: C64) -> Vec<C64> {
        a.iter().map(|x| x * s).collect()
    }

    pub fn pow(a: &[C64], n: usize) -> Vec<C64> {
        let mut out = vec![one()];
        for _ in 0..n {
            out = mul(&out, a);
        }
        out
    }

    pub fn max_modulus(p: &[C64]) -> f64 {
        p.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// `|p(z)| / Σ|p_k||z|^k`, the backward-error residual.
    pub fn relative_residual(p: &[C64], z: C64) -> f64 {
        let r = z.norm();
        let scale = p.iter().rev().fold(0.0, |acc, c| acc * r + c.norm());
        if scale == 0.0 {
            0.0
        } else {
            eval(p, z).norm() / scale
        }
    }

    /// Aberth–Ehrlich simultaneous iteration on a polynomial with nonzero
    /// leading and constant coefficients. Returns roots and the worst residual.
    pub fn aberth(p: &[C64]) -> (Vec<C64>, f64) {
        let n = p.len() - 1;
        if n == 0 {
            return (vec![], 0.0);
        }
        if n == 1 {
            let z = -p[0] / p[1];
            return (vec![z], relative_residual(p, z));
        }
        let radius = (p[0].norm() / p[n].norm()).powf(1.0 / n as f64);
        let mut z: Vec<C64> = (0..n)
            .map(|k| {
                let theta = 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / n as f64 + 0.4;
                C64::from_polar(radius, theta)
            })
            .collect();
        let dp = derivative(p);
        let mut done = vec![false; n];
        for _ in 0..800 {
            let mut moved = false;
            for k in 0..n {
                if done[k] {
                    continue;
                }
                let f = eval(p, z[k]);
                let df = eval(&dp, z[k]);
                if f.norm() == 0.0 {
                    done[k] = true;
                    continue;
                }
                let w = f / df;
                let s: C64 = (0..n)
                    .filter(|&j| j != k)
                    .map(|j| one() / (z[k] - z[j]))
                    .sum();
                let step = w / (one() - w * s);
                if !step.is_finite() {
                    continue;
                }
                z[k] -= step;
                if step.norm() <= 4.0 * f64::EPSILON * z[k].norm().max(1e-300) {
                    done[k] = true;
                } else {
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
        let res = z
            .iter()
            .map(|&x| relative_residual(p, x))
            .fold(0.0, f64::max);
        (z, res)
    }

    /// Newton polish, keeping the original root if the residual worsens.
    pub fn polish(p: &[C64], z: C64, iters: usize) -> C64 {
        let mut best = z;
        let mut best_res = relative_residual(p, z);
        let mut x = z;
        for _ in 0..iters {
            let (f, df) = eval_d(p, x);
            if df.norm() == 0.0 {
                break;
            }
            x -= f / df;
            let r = relative_residual(p, x);
            if r < best_res {
                best = x;
                best_res = r;
            }
            if r == 0.0 {
                break;
            }
        }
        best
    }
}

/// Roots on the sphere of the homogeneous polynomial `Σ p_k u^k v^{n−k}`,
/// `n = p.len() − 1`, as clustered points with multiplicity.
pub fn homogeneous_roots(p: &[C64]) -> Result<Vec<(SpherePoint, usize)>, RationalError> {
    let n = p.len() - 1;
    let scale = poly::max_modulus(p);
    if scale == 0.0 {
        return Err(RationalError::RootFindFailure { residual: f64::NAN });
    }
    let tiny = 1e-15 * scale;
    let low = p.iter().take_while(|c| c.norm() <= tiny).count();
    let high = p.iter().rev().take_while(|c| c.norm() <= tiny).count();
    let mut roots: Vec<SpherePoint> = Vec::with_capacity(n);
    roots.extend(std::iter::repeat_n(SpherePoint::real(0.0), low));
    roots.extend(std::iter::repeat_n(SpherePoint::infinity(), high));
    if low + high < n + 1 {
        let core = &p[low..=n - high];
        // chart A in z, chart B in w = 1/z
        let rev: Vec<C64> = core.iter().rev().copied().collect();
        let (za, ra) = poly::aberth(core);
        let (zb, rb) = poly::aberth(&rev);
        let mut picked: Vec<SpherePoint> = za
            .iter()
            .filter(|z| z.norm() <= 1.0)
            .map(|&z| SpherePoint::finite(poly::polish(core, z, 4)))
            .collect();
        picked.extend(
            zb.iter()
                .filter(|w| w.norm() < 1.0)
                .map(|&w| SpherePoint::new(one(), poly::polish(&rev, w, 4))),
        );
        if picked.len() != core.len() - 1 {
            // charts disagree on the unit circle; trust the better-converged one
            picked = if ra <= rb {
                za.iter().map(|&z| SpherePoint::finite(z)).collect()
            } else {
                zb.iter().map(|&w| SpherePoint::new(one(), w)).collect()
            };
        }
        roots.extend(picked);
    }
    let clustered = cluster(&roots, CLUSTER_TOLERANCE);
    let worst = clustered
        .iter()
        .filter(|(_, m)| *m == 1)
        .map(|(r, _)| homogeneous_residual(p, r))
        .fold(0.0, f64::max);
    if !(worst < 1e-10) {
        return Err(RationalError::RootFindFailure { residual: worst });
    }
    Ok(clustered)
}

/// Relative residual of a homogeneous polynomial at a point.
pub fn homogeneous_residual(p: &[C64], x: &SpherePoint) -> f64 {
    match x.affine() {
        Some(z) if z.norm() <= 1.0 => poly::relative_residual(p, z),
        _ => {
            let rev: Vec<C64> = p.iter().rev().copied().collect();
            let w = x.v() / x.u();
            poly::relative_residual(&rev, w)
        }
    }
}

/// Groups points within `tol` chordal distance (single linkage).
pub fn cluster(points: &[SpherePoint], tol: f64) -> Vec<(SpherePoint, usize)> {
    let n = points.len();
    let mut group: Vec<usize> = (0..n).collect();
    fn find(g: &mut Vec<usize>, i: usize) -> usize {
        let mut r = i;
        while g[r] != r {
            r = g[r];
        }
        g[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if points[i].chordal(&points[j]) < tol {
                let (a, b) = (find(&mut group, i), find(&mut group, j));
                if a != b {
                    group[b] = a;
                }
            }
        }
    }
    let mut out: Vec<(Vec<usize>, usize)> = Vec::new();
    for i in 0..n {
        let r = find(&mut group, i);
        match out.iter_mut().find(|(m, _)| m[0] == r) {
            Some(entry) => entry.1 += 1,
            None => out.push((vec![r], 1)),
        }
    }
    out.into_iter()
        .map(|(m, c)| {
            // representative: the exact 0/∞ if present, otherwise ambient mean
            let members: Vec<&SpherePoint> = (0..n)
                .filter(|&i| find(&mut group, i) == m[0])
                .map(|i| &points[i])
                .collect();
            let rep = if c == 1 {
                *members[0]
            } else if let Some(p) = members
                .iter()
                .find(|p| p.is_infinity() || p.affine() == Some(zero()))
            {
                **p
            } else {
                let mut s = [0.0; 3];
                for p in &members {
                    let x = p.to_xyz();
                    for k in 0..3 {
                        s[k] += x[k];
                    }
                }
                SpherePoint::from_xyz(&s)
            };
            (rep, c)
        })
        .collect()
}

/// `[u:v] ↦ [N(u,v) : D(u,v)]` with `N = Σ n_k u^k v^{d−k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RationalJson", into = "RationalJson")]
pub struct RationalMap {
    num: Vec<C64>,
    den: Vec<C64>,
}

#[derive(Serialize, Deserialize)]
struct RationalJson {
    degree: usize,
    numerator: Vec<C64>,
    denominator: Vec<C64>,
}

impl TryFrom<RationalJson> for RationalMap {
    type Error = RationalError;
    fn try_from(j: RationalJson) -> Result<Self, RationalError> {
        let r = RationalMap::new(j.numerator, j.denominator)?;
        if r.degree() != j.degree {
            return Err(RationalError::DegreeTooLow(r.degree()));
        }
        Ok(r)
    }
}

impl From<RationalMap> for RationalJson {
    fn from(r: RationalMap) -> Self {
        RationalJson {
            degree: r.degree(),
            numerator: r.num,
            denominator: r.den,
        }
    }
}

impl RationalMap {
    /// Builds `N/D` from ascending coefficient lists; trailing coefficients
    /// that vanish in both are dropped, then the pair is scaled to unit
    /// max-modulus.
    pub fn new(num: Vec<C64>, den: Vec<C64>) -> Result<Self, RationalError> {
        let n = num.len().max(den.len());
        let mut num = num;
        let mut den = den;
        num.resize(n, zero());
        den.resize(n, zero());
        while num.len() > 1 && num.last() == Some(&zero()) && den.last() == Some(&zero()) {
            num.pop();
            den.pop();
        }
        let scale = poly::max_modulus(&num).max(poly::max_modulus(&den));
        if !(scale > 0.0) || !scale.is_finite() || num.len() < 2 {
            return Err(RationalError::DegreeTooLow(num.len().saturating_sub(1)));
        }
        let s = C64::new(1.0 / scale, 0.0);
        let r = Self {
            num: poly::scale(&num, s),
            den: poly::scale(&den, s),
        };
        r.check_coprime()?;
        Ok(r)
    }

    pub fn from_real(num: &[f64], den: &[f64]) -> Result<Self, RationalError> {
        let c = |v: &[f64]| v.iter().map(|&x| C64::new(x, 0.0)).collect();
        Self::new(c(num), c(den))
    }

    /// Builds from a flat `[num…, den…]` vector of length `2d + 2` without
    /// the coprimality check (used inside iterative solvers).
    pub fn from_flat_unchecked(c: &[C64]) -> Self {
        let h = c.len() / 2;
        Self {
            num: c[..h].to_vec(),
            den: c[h..].to_vec(),
        }
    }

    pub fn from_flat(c: &[C64]) -> Result<Self, RationalError> {
        let h = c.len() / 2;
        Self::new(c[..h].to_vec(), c[h..].to_vec())
    }

    pub fn flat(&self) -> Vec<C64> {
        let mut v = self.num.clone();
        v.extend_from_slice(&self.den);
        v
    }

    fn check_coprime(&self) -> Result<(), RationalError> {
        let nz = poly::max_modulus(&self.num) > 0.0;
        let dz = poly::max_modulus(&self.den) > 0.0;
        if !nz || !dz {
            // constant 0 or ∞ map
            return Err(RationalError::DegenerateMap(0.0));
        }
        let (a, b) = if self.num.iter().filter(|c| c.norm() > 0.0).count() <= self.den.iter().filter(|c| c.norm() > 0.0).count() {
            (&self.num, &self.den)
        } else {
            (&self.den, &self.num)
        };
        let roots = homogeneous_roots(a)
            .map_err(|_| RationalError::DegenerateMap(f64::NAN))?;
        for (r, _) in roots {
            let val = homogeneous_residual(b, &r);
            if val < 1e-10 {
                return Err(RationalError::DegenerateMap(val));
            }
        }
        Ok(())
    }

    pub fn degree(&self) -> usize {
        self.num.len() - 1
    }

    pub fn numerator(&self) -> &[C64] {
        &self.num
    }

    pub fn denominator(&self) -> &[C64] {
        &self.den
    }

    /// `N(u,v)`, `D(u,v)` evaluated at a normalized point, in whichever chart
    /// keeps the larger coordinate equal to 1.
    fn eval_pair(&self, p: &SpherePoint) -> (C64, C64) {
        if p.v() == one() {
            let z = p.u();
            (poly::eval(&self.num, z), poly::eval(&self.den, z))
        } else {
            let w = p.v();
            let rn: Vec<C64> = self.num.iter().rev().copied().collect();
            let rd: Vec<C64> = self.den.iter().rev().copied().collect();
            (poly::eval(&rn, w), poly::eval(&rd, w))
        }
    }

    pub fn evaluate(&self, p: &SpherePoint) -> SpherePoint {
        let (n, d) = self.eval_pair(p);
        SpherePoint::new(n, d)
    }

    /// Affine evaluation at a finite point.
    pub fn eval_affine(&self, z: C64) -> C64 {
        poly::eval(&self.num, z) / poly::eval(&self.den, z)
    }

    pub fn iterate(&self, p: &SpherePoint, n: usize) -> SpherePoint {
        (0..n).fold(*p, |q, _| self.evaluate(&q))
    }

    /// `|DR|` with respect to the chordal metric.
    pub fn spherical_derivative(&self, p: &SpherePoint) -> f64 {
        // in the chart where the larger coordinate is 1 the Wronskian reduces
        // to N'D − ND'; in the chart at ∞ the roles of the coefficients reverse
        let (chart, x): (bool, C64) = if p.v() == one() {
            (true, p.u())
        } else {
            (false, p.v())
        };
        let (n, d) = if chart {
            (self.num.clone(), self.den.clone())
        } else {
            (
                self.num.iter().rev().copied().collect(),
                self.den.iter().rev().copied().collect(),
            )
        };
        let (nv, nd) = poly::eval_d(&n, x);
        let (dv, dd) = poly::eval_d(&d, x);
        let w = (nd * dv - nv * dd).norm();
        w * (1.0 + x.norm_sqr()) / (nv.norm_sqr() + dv.norm_sqr())
    }

    /// Homogeneous Wronskian `N'D − ND'` as a degree-(2d−2) form.
    pub fn wronskian(&self) -> Vec<C64> {
        let d = self.degree();
        let w = poly::add(
            &poly::mul(&poly::derivative(&self.num), &self.den),
            &poly::scale(&poly::mul(&self.num, &poly::derivative(&self.den)), -one()),
        );
        let mut w = w;
        w.resize(2 * d - 1, zero());
        w
    }

    pub fn critical_points(&self) -> Result<Vec<(SpherePoint, usize)>, RationalError> {
        if self.degree() < 2 {
            return Err(RationalError::DegreeTooLow(self.degree()));
        }
        let w = self.wronskian();
        let w_scale = poly::max_modulus(&w);
        let mut w = w;
        // cancellation noise in the top coefficients would place a spurious
        // huge root instead of the exact critical point at ∞
        for c in w.iter_mut() {
            if c.norm() < 1e-14 * w_scale {
                *c = zero();
            }
        }
        homogeneous_roots(&w)
    }

    pub fn critical_values(&self) -> Result<Vec<SpherePoint>, RationalError> {
        Ok(self
            .critical_points()?
            .iter()
            .map(|(c, _)| self.evaluate(c))
            .collect())
    }

    /// `q.v·N − q.u·D`, whose roots are the preimages of `q`.
    pub fn fiber_form(&self, q: &SpherePoint) -> Vec<C64> {
        poly::add(
            &poly::scale(&self.num, q.v()),
            &poly::scale(&self.den, -q.u()),
        )
    }

    pub fn preimages(&self, q: &SpherePoint) -> Result<Vec<(SpherePoint, usize)>, RationalError> {
        homogeneous_roots(&self.fiber_form(q))
    }

    /// Preimages of `w` listed with multiplicity and without clustering,
    /// in closed form for degree 2.
    pub fn fiber_roots(&self, w: &SpherePoint) -> Result<Vec<SpherePoint>, RationalError> {
        let p = self.fiber_form(w);
        if p.len() == 3 {
            let (c0, c1, c2) = (p[0], p[1], p[2]);
            let s = (c1 * c1 - 4.0 * c0 * c2).sqrt();
            let q = if (c1 + s).norm() >= (c1 - s).norm() { -(c1 + s) / 2.0 } else { -(c1 - s) / 2.0 };
            let zero = C64::new(0.0, 0.0);
            if q == zero {
                let p = if c2 != zero { SpherePoint::real(0.0) } else if c0 != zero { SpherePoint::infinity() } else {
                    return Err(RationalError::RootFindFailure { residual: f64::NAN });
                };
                return Ok(vec![p, p]);
            }
            let a = SpherePoint::try_new(q, c2).ok_or(RationalError::RootFindFailure { residual: f64::NAN })?;
            let b = SpherePoint::try_new(c0, q).ok_or(RationalError::RootFindFailure { residual: f64::NAN })?;
            return Ok(vec![a, b]);
        }
        Ok(homogeneous_roots(&p)?
            .into_iter()
            .flat_map(|(q, m)| std::iter::repeat_n(q, m))
            .collect())
    }

    /// Local degree at `p`: one more than the critical multiplicity there.
    pub fn local_degree(&self, p: &SpherePoint) -> Result<usize, RationalError> {
        let cps = self.critical_points()?;
        Ok(1 + cps
            .iter()
            .filter(|(c, _)| c.chordal(p) < 1e-6)
            .map(|(_, m)| m)
            .sum::<usize>())
    }

    /// `post ∘ R ∘ pre` in coefficient form.
    pub fn transform(&self, post: &MobiusMap, pre: &MobiusMap) -> RationalMap {
        let d = self.degree();
        let lin_u = [pre.b, pre.a];
        let lin_v = [pre.d, pre.c];
        let mut n2 = vec![zero(); d + 1];
        let mut d2 = vec![zero(); d + 1];
        for k in 0..=d {
            let term = poly::mul(&poly::pow(&lin_u, k), &poly::pow(&lin_v, d - k));
            for (i, t) in term.iter().enumerate() {
                n2[i] += self.num[k] * t;
                d2[i] += self.den[k] * t;
            }
        }
        let n3 = poly::add(&poly::scale(&n2, post.a), &poly::scale(&d2, post.b));
        let d3 = poly::add(&poly::scale(&n2, post.c), &poly::scale(&d2, post.d));
        let scale = poly::max_modulus(&n3).max(poly::max_modulus(&d3));
        let s = C64::new(1.0 / scale, 0.0);
        RationalMap {
            num: poly::scale(&n3, s),
            den: poly::scale(&d3, s),
        }
    }

    /// `M ∘ R ∘ M⁻¹`.
    pub fn conjugate(&self, m: &MobiusMap) -> RationalMap {
        self.transform(m, &m.inverse())
    }

    /// Map in centered charts: `C_{R(x)} ∘ R ∘ C_x⁻¹`, fixing 0.
    pub fn centered_at(&self, x: &SpherePoint) -> RationalMap {
        let y = self.evaluate(x);
        self.transform(&y.centered_chart(), &x.centered_chart().inverse())
    }

    /// Complex derivative at 0 of the centered-chart map at `x`.
    pub fn chart_multiplier(&self, x: &SpherePoint) -> C64 {
        let f = self.centered_at(x);
        // f(0) = 0, so f'(0) = N'(0)/D(0)
        f.num[1] / f.den[0]
    }

    /// Newton refinement of a period-`p` point in centered charts.
    pub fn refine_periodic(&self, x: &SpherePoint, period: usize) -> SpherePoint {
        let mut x = *x;
        for _ in 0..30 {
            let mut orbit = vec![x];
            let mut mult = one();
            for _ in 0..period {
                let q = *orbit.last().unwrap();
                mult *= self.chart_multiplier(&q);
                orbit.push(self.evaluate(&q));
            }
            let back = x.centered_chart();
            let end = orbit[period];
            let g0 = back.apply(&end);
            let Some(g0) = g0.affine() else { break };
            // derivative of the closing transition at 0
            let t = back.compose(&end.centered_chart().inverse());
            let dt = t.derivative(zero());
            let g1 = dt * mult - one();
            if g1.norm() < 1e-300 {
                break;
            }
            let step = -g0 / g1;
            if !step.is_finite() {
                break;
            }
            x = back.inverse().apply(&SpherePoint::finite(step));
            if step.norm() < 1e-16 {
                break;
            }
        }
        x
    }

    pub fn approx_eq_projective(&self, other: &RationalMap, tol: f64) -> bool {
        self.degree() == other.degree() && projective_distance(&self.flat(), &other.flat()) < tol
    }
}

/// Distance between unit-normalized coefficient vectors after the best
/// common phase; equals `sqrt(2 − 2|⟨a,b⟩|)` without its cancellation.
pub fn projective_distance(a: &[C64], b: &[C64]) -> f64 {
    let na = a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let ip: C64 = a.iter().zip(b).map(|(x, y)| x * y.conj()).sum();
    let phase = if ip.norm() > 0.0 { ip / ip.norm() } else { one() };
    a.iter()
        .zip(b)
        .map(|(x, y)| (x / na - phase * y / nb).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Finite marked forward-invariant set with successor map and local degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkedPortrait {
    pub points: Vec<SpherePoint>,
    pub successor: Vec<usize>,
    pub local_degree: Vec<usize>,
}

impl MarkedPortrait {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, p: &SpherePoint, tol: f64) -> Option<usize> {
        self.points.iter().position(|q| q.chordal(p) < tol)
    }

    /// Largest `R(points[i])` vs `points[successor[i]]` chordal mismatch.
    pub fn closure_defect(&self, r: &RationalMap) -> f64 {
        self.points
            .iter()
            .zip(&self.successor)
            .map(|(p, &j)| r.evaluate(p).chordal(&self.points[j]))
            .fold(0.0, f64::max)
    }

    /// Indices lying on cycles of the successor map.
    pub fn periodic(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| {
                let mut j = self.successor[i];
                for _ in 0..self.len() {
                    if j == i {
                        return true;
                    }
                    j = self.successor[j];
                }
                false
            })
            .collect()
    }

    /// Period of the cycle through `i`, if periodic.
    pub fn period(&self, i: usize) -> Option<usize> {
        let mut j = self.successor[i];
        for k in 1..=self.len() {
            if j == i {
                return Some(k);
            }
            j = self.successor[j];
        }
        None
    }
}

/// Closure of the forward orbits of the critical values.
pub fn postcritical_analysis(
    r: &RationalMap,
    max_iter: usize,
    tol: f64,
) -> Result<MarkedPortrait, RationalError> {
    let cps = r.critical_points()?;
    let mut points: Vec<SpherePoint> = Vec::new();
    let mut successor: Vec<Option<usize>> = Vec::new();
    let near = |pts: &[SpherePoint], x: &SpherePoint| -> Result<Option<usize>, RationalError> {
        let mut hit = None;
        for (i, q) in pts.iter().enumerate() {
            let d = q.chordal(x);
            if d < tol {
                if hit.is_some() {
                    return Err(RationalError::AmbiguousCollision(d));
                }
                hit = Some(i);
            }
        }
        Ok(hit)
    };
    for (c, _) in &cps {
        let mut x = r.evaluate(c);
        let mut prev: Option<usize> = None;
        let mut closed = false;
        for _ in 0..max_iter {
            let idx = match near(&points, &x)? {
                Some(i) => {
                    if let Some(p) = prev {
                        successor[p] = Some(i);
                    }
                    closed = true;
                    i
                }
                None => {
                    points.push(x);
                    successor.push(None);
                    if let Some(p) = prev {
                        successor[p] = Some(points.len() - 1);
                    }
                    points.len() - 1
                }
            };
            if closed {
                break;
            }
            prev = Some(idx);
            x = r.evaluate(&x);
        }
        if !closed {
            return Err(RationalError::NotFiniteWithin(max_iter));
        }
    }
    let successor: Vec<usize> = successor.into_iter().map(|s| s.unwrap()).collect();
    let mut portrait = MarkedPortrait {
        local_degree: vec![1; points.len()],
        points,
        successor,
    };
    // confirm cycles by Newton refinement, then re-derive preperiodic points
    let periodic = portrait.periodic();
    for i in 0..portrait.len() {
        if periodic[i] {
            let p = portrait.period(i).unwrap();
            let refined = r.refine_periodic(&portrait.points[i], p);
            // an orbit merely converging to a cycle sits measurably off it
            if refined.chordal(&portrait.points[i]) > 0.1 * tol {
                return Err(RationalError::NotFiniteWithin(max_iter));
            }
            portrait.points[i] = refined;
        }
    }
    for i in 0..portrait.len() {
        portrait.local_degree[i] = 1 + cps
            .iter()
            .filter(|(c, _)| c.chordal(&portrait.points[i]) < 1e-6)
            .map(|(_, m)| m)
            .sum::<usize>();
    }
    Ok(portrait)
}

/// An attracting cycle found by iterating a critical point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractingCycle {
    pub points: Vec<SpherePoint>,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityCertificate {
    pub hyperbolic: bool,
    pub cycles: Vec<AttractingCycle>,
}

pub fn cycle_multiplier(r: &RationalMap, x: &SpherePoint, period: usize) -> C64 {
    let mut m = one();
    let mut q = *x;
    for _ in 0..period {
        m *= r.chart_multiplier(&q);
        q = r.evaluate(&q);
    }
    // the chart at the closing point differs from the starting chart by a
    // rotation fixing 0; multiplying by its derivative makes m chart-free
    let t = x.centered_chart().compose(&q.centered_chart().inverse());
    m * t.derivative(zero())
}

/// Certifies that every critical orbit is attracted to a cycle of multiplier
/// modulus below `1 − tol`.
pub fn is_hyperbolic(
    r: &RationalMap,
    max_iter: usize,
    tol: f64,
) -> Result<HyperbolicityCertificate, RationalError> {
    let cps = r.critical_points()?;
    let mut cycles: Vec<AttractingCycle> = Vec::new();
    for (c, _) in &cps {
        let mut x = *c;
        let mut found = None;
        'outer: for n in 0..max_iter {
            let mut y = x;
            for p in 1..=64 {
                y = r.evaluate(&y);
                if y.chordal(&x) < 1e-6 {
                    found = Some((x, p));
                    if n > 8 {
                        break 'outer;
                    }
                    break;
                }
            }
            if found.is_some() && n > 8 {
                break;
            }
            x = r.evaluate(&x);
        }
        let Some((x, p)) = found else {
            return Err(RationalError::Inconclusive(format!(
                "critical point {c} not attracted to a cycle within {max_iter} iterations"
            )));
        };
        let x = r.refine_periodic(&x, p);
        let mult = cycle_multiplier(r, &x, p).norm();
        if mult > 1.0 - tol {
            return Err(RationalError::Inconclusive(format!(
                "cycle through {x} has multiplier modulus {mult:.6}"
            )));
        }
        if cycles
            .iter()
            .any(|cy| cy.points.iter().any(|q| q.chordal(&x) < 1e-6))
        {
            continue;
        }
        let mut pts = vec![x];
        for _ in 1..p {
            pts.push(r.evaluate(pts.last().unwrap()));
        }
        cycles.push(AttractingCycle {
            points: pts,
            multiplier: mult,
        });
    }
    Ok(HyperbolicityCertificate {
        hyperbolic: true,
        cycles,
    })
}
