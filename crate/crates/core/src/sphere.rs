//! Riemann-sphere geometry: homogeneous points, the chordal metric, Möbius
//! maps, geodesic polylines and the tube-supported point-push isotopy.
//!
//! Points are stored as homogeneous pairs `[u:v]` whose larger component is
//! exactly 1. Geometry that is easier in ambient coordinates
//! (geodesics, tube distances, the push flow) goes through the unit sphere in
//! R³, where chordal distance is plain Euclidean distance.

use num_complex::Complex64 as C64;
use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Separation below which two points of a triple count as the same point.
pub const TRIPLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SphereError {
    #[error("degenerate triple: points {0} and {1} coincide within tolerance")]
    DegenerateTriple(usize, usize),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("tube overlap: {0}")]
    TubeOverlap(String),
    #[error("push time {0} outside [0,1]")]
    TimeOutOfRange(f64),
}

/// A point `[u:v]` of the Riemann sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpherePoint {
    u: C64,
    v: C64,
}

pub type Vec3 = [f64; 3];

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn normalize(a: &Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

impl SpherePoint {
    /// Builds `[u:v]`; panics on `(0,0)`, which is not a point.
    pub fn new(u: C64, v: C64) -> Self {
        Self::try_new(u, v).expect("(0,0) is not a point of the sphere")
    }

    pub fn try_new(u: C64, v: C64) -> Option<Self> {
        let (nu, nv) = (u.norm(), v.norm());
        if !(nu.max(nv) > 0.0) || !(nu + nv).is_finite() {
            return None;
        }
        let one = C64::new(1.0, 0.0);
        if nv >= nu {
            Some(Self { u: u / v, v: one })
        } else {
            Some(Self { u: one, v: v / u })
        }
    }

    pub fn finite(z: C64) -> Self {
        Self::new(z, C64::new(1.0, 0.0))
    }

    pub fn real(x: f64) -> Self {
        Self::finite(C64::new(x, 0.0))
    }

    pub fn infinity() -> Self {
        Self {
            u: C64::new(1.0, 0.0),
            v: C64::new(0.0, 0.0),
        }
    }

    pub fn u(&self) -> C64 {
        self.u
    }

    pub fn v(&self) -> C64 {
        self.v
    }

    pub fn is_infinity(&self) -> bool {
        self.v == C64::new(0.0, 0.0)
    }

    /// Affine coordinate, `None` at ∞ and where `u/v` overflows.
    pub fn affine(&self) -> Option<C64> {
        if self.is_infinity() {
            return None;
        }
        let n = self.v.norm();
        let z = if n > 1e-150 { self.u / self.v } else { self.u * (self.v.conj() / n) / n };
        z.is_finite().then_some(z)
    }

    /// Affine coordinate with ∞ mapped to an infinite complex number.
    pub fn to_complex(&self) -> C64 {
        self.affine()
            .unwrap_or_else(|| C64::new(f64::INFINITY, 0.0))
    }

    /// `|u v' − v u'|` for the unit-norm representatives.
    pub fn cross_norm(&self, other: &SpherePoint) -> f64 {
        let n = ((self.u.norm_sqr() + self.v.norm_sqr())
            * (other.u.norm_sqr() + other.v.norm_sqr()))
        .sqrt();
        (self.u * other.v - self.v * other.u).norm() / n
    }

    pub fn chordal(&self, other: &SpherePoint) -> f64 {
        (2.0 * self.cross_norm(other)).min(2.0)
    }

    pub fn approx_eq(&self, other: &SpherePoint, tol: f64) -> bool {
        self.cross_norm(other) <= tol
    }

    /// Inverse stereographic projection onto the unit sphere (∞ ↦ north pole).
    pub fn to_xyz(&self) -> Vec3 {
        let uu = self.u.norm_sqr();
        let vv = self.v.norm_sqr();
        let w = self.u * self.v.conj();
        let s = uu + vv;
        [2.0 * w.re / s, 2.0 * w.im / s, (uu - vv) / s]
    }

    pub fn from_xyz(p: &Vec3) -> Self {
        let p = normalize(p);
        if p[2] <= 0.0 {
            // z = (x + iy)/(1 − z3), stable away from the north pole
            Self::finite(C64::new(p[0], p[1]) / (1.0 - p[2]))
        } else {
            // 1/z = (x − iy)/(1 + z3), stable away from the south pole
            Self::new(C64::new(1.0, 0.0), C64::new(p[0], -p[1]) / (1.0 + p[2]))
        }
    }

    /// Unitary chart sending this point to 0 (a rotation of the sphere).
    pub fn centered_chart(&self) -> MobiusMap {
        let n = (self.u.norm_sqr() + self.v.norm_sqr()).sqrt();
        let a = self.u / n;
        let b = self.v / n;
        MobiusMap::from_raw(b, -a, a.conj(), b.conj())
    }
}

impl fmt::Display for SpherePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.affine() {
            None => write!(f, "∞"),
            Some(z) => write!(f, "{:.6}{:+.6}i", z.re, z.im),
        }
    }
}

impl Serialize for SpherePoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.affine() {
            None => s.serialize_str("inf"),
            Some(z) => {
                let mut seq = s.serialize_seq(Some(2))?;
                seq.serialize_element(&z.re)?;
                seq.serialize_element(&z.im)?;
                seq.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for SpherePoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct PointVisitor;
        impl<'de> Visitor<'de> for PointVisitor {
            type Value = SpherePoint;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a [re, im] pair or the string \"inf\"")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<SpherePoint, E> {
                if v == "inf" {
                    Ok(SpherePoint::infinity())
                } else {
                    Err(E::custom(format!("unknown point sentinel {v:?}")))
                }
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<SpherePoint, A::Error> {
                let re: f64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let im: f64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<f64>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                Ok(SpherePoint::finite(C64::new(re, im)))
            }
        }
        d.deserialize_any(PointVisitor)
    }
}

/// `[u:v] ↦ [au+bv : cu+dv]`, normalized to `ad − bc = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MobiusMap {
    pub a: C64,
    pub b: C64,
    pub c: C64,
    pub d: C64,
}

impl MobiusMap {
    /// Normalizes the determinant to 1 and fixes the sign so that the first
    /// nonzero entry has nonnegative real part.
    pub fn new(a: C64, b: C64, c: C64, d: C64) -> Option<Self> {
        let det = a * d - b * c;
        let scale = (a.norm().max(b.norm()).max(c.norm()).max(d.norm())).powi(2);
        if !(det.norm() > 1e-14 * scale) {
            return None;
        }
        let s = det.sqrt();
        let mut m = Self::from_raw(a / s, b / s, c / s, d / s);
        let first = [m.a, m.b, m.c, m.d]
            .into_iter()
            .find(|x| x.norm() > 0.0)
            .unwrap();
        if first.re < 0.0 || (first.re == 0.0 && first.im < 0.0) {
            m = Self::from_raw(-m.a, -m.b, -m.c, -m.d);
        }
        Some(m)
    }

    pub(crate) fn from_raw(a: C64, b: C64, c: C64, d: C64) -> Self {
        Self { a, b, c, d }
    }

    pub fn identity() -> Self {
        let one = C64::new(1.0, 0.0);
        let zero = C64::new(0.0, 0.0);
        Self::from_raw(one, zero, zero, one)
    }

    pub fn apply(&self, p: &SpherePoint) -> SpherePoint {
        SpherePoint::new(self.a * p.u + self.b * p.v, self.c * p.u + self.d * p.v)
    }

    /// Affine action on a finite point whose image is finite.
    pub fn apply_affine(&self, z: C64) -> C64 {
        (self.a * z + self.b) / (self.c * z + self.d)
    }

    /// Derivative of the affine action, `det/(cz+d)²`.
    pub fn derivative(&self, z: C64) -> C64 {
        let det = self.a * self.d - self.b * self.c;
        det / (self.c * z + self.d).powi(2)
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.d, -self.b, -self.c, self.a).expect("Möbius maps are invertible")
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &MobiusMap) -> Self {
        Self::new(
            self.a * other.a + self.b * other.c,
            self.a * other.b + self.b * other.d,
            self.c * other.a + self.d * other.c,
            self.c * other.b + self.d * other.d,
        )
        .expect("composition of invertible maps")
    }

    /// Map sending `p1 ↦ 0`, `p2 ↦ 1`, `p3 ↦ ∞`.
    fn to_standard(p: &[SpherePoint; 3]) -> Result<Self, SphereError> {
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            if p[i].chordal(&p[j]) <= TRIPLE_TOLERANCE {
                return Err(SphereError::DegenerateTriple(i, j));
            }
        }
        // rows annihilate p1 and p3; scaled so that p2 ↦ 1
        let w1 = p[1].u * p[0].v - p[1].v * p[0].u;
        let w3 = p[1].u * p[2].v - p[1].v * p[2].u;
        let alpha = w3;
        let beta = w1;
        Self::new(
            alpha * p[0].v,
            -alpha * p[0].u,
            beta * p[2].v,
            -beta * p[2].u,
        )
        .ok_or(SphereError::DegenerateTriple(0, 2))
    }

    /// The unique Möbius map with `src[i] ↦ dst[i]`.
    pub fn from_triples(src: &[SpherePoint; 3], dst: &[SpherePoint; 3]) -> Result<Self, SphereError> {
        let ms = Self::to_standard(src)?;
        let md = Self::to_standard(dst)?;
        Ok(md.inverse().compose(&ms))
    }

    pub fn approx_eq(&self, other: &MobiusMap, tol: f64) -> bool {
        let lhs = [self.a, self.b, self.c, self.d];
        let rhs = [other.a, other.b, other.c, other.d];
        let plus = lhs.iter().zip(&rhs).all(|(x, y)| (x - y).norm() < tol);
        let minus = lhs.iter().zip(&rhs).all(|(x, y)| (x + y).norm() < tol);
        plus || minus
    }
}

/// Geodesic interpolation between unit vectors (`f ∈ [0,1]`).
pub fn slerp(x: &Vec3, y: &Vec3, f: f64) -> Vec3 {
    let c = dot(x, y).clamp(-1.0, 1.0);
    let omega = c.acos();
    if omega < 1e-9 {
        return normalize(&add(&scale(x, 1.0 - f), &scale(y, f)));
    }
    let s = omega.sin();
    let p = add(
        &scale(x, ((1.0 - f) * omega).sin() / s),
        &scale(y, (f * omega).sin() / s),
    );
    normalize(&p)
}

/// Chordal distance from `p` to the geodesic arc `a → b` (all unit vectors).
pub fn arc_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ends = norm(&sub(p, a)).min(norm(&sub(p, b)));
    let n = cross(a, b);
    let nn = norm(&n);
    if nn < 1e-14 {
        return ends;
    }
    let n = scale(&n, 1.0 / nn);
    let q = sub(p, &scale(&n, dot(p, &n)));
    let qn = norm(&q);
    if qn < 1e-14 {
        return ends;
    }
    let q = scale(&q, 1.0 / qn);
    // q lies on the arc iff it is on the same side of both end normals
    let inside = dot(&cross(a, &q), &n) >= 0.0 && dot(&cross(&q, b), &n) >= 0.0;
    if inside {
        norm(&sub(p, &q)).min(ends)
    } else {
        ends
    }
}

/// A polyline on the sphere made of geodesic arcs, parameterized on `[0,1]`
/// proportionally to cumulative chordal length.
#[derive(Clone, Debug, PartialEq)]
pub struct SpherePath {
    vertices: Vec<SpherePoint>,
    xyz: Vec<Vec3>,
    cumulative: Vec<f64>,
    trivial: bool,
}

impl SpherePath {
    pub fn new(vertices: Vec<SpherePoint>) -> Result<Self, SphereError> {
        if vertices.len() < 2 {
            return Err(SphereError::InvalidPath("fewer than two vertices".into()));
        }
        let xyz: Vec<Vec3> = vertices.iter().map(|p| p.to_xyz()).collect();
        let mut cumulative = vec![0.0];
        for w in xyz.windows(2) {
            let d = norm(&sub(&w[0], &w[1]));
            if d < 1e-14 {
                return Err(SphereError::InvalidPath("repeated consecutive vertex".into()));
            }
            if d > 2.0 - 1e-9 {
                return Err(SphereError::InvalidPath("antipodal consecutive vertices".into()));
            }
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Ok(Self {
            vertices,
            xyz,
            cumulative,
            trivial: false,
        })
    }

    /// The constant path at `p`.
    pub fn trivial(p: SpherePoint) -> Self {
        Self {
            vertices: vec![p, p],
            xyz: vec![p.to_xyz(), p.to_xyz()],
            cumulative: vec![0.0, 0.0],
            trivial: true,
        }
    }

    pub fn is_trivial(&self) -> bool {
        self.trivial
    }

    pub fn vertices(&self) -> &[SpherePoint] {
        &self.vertices
    }

    pub fn start(&self) -> SpherePoint {
        self.vertices[0]
    }

    pub fn end(&self) -> SpherePoint {
        *self.vertices.last().unwrap()
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn reversed(&self) -> Self {
        if self.trivial {
            return self.clone();
        }
        let mut v = self.vertices.clone();
        v.reverse();
        Self::new(v).expect("reversal of a valid path")
    }

    /// Parameter values of the vertices.
    pub fn vertex_params(&self) -> Vec<f64> {
        if self.trivial {
            return vec![0.0, 1.0];
        }
        let l = self.length();
        self.cumulative.iter().map(|c| c / l).collect()
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let l = self.length();
        let target = s.clamp(0.0, 1.0) * l;
        let n = self.xyz.len() - 1;
        let mut i = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&target).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i >= n {
            i = n - 1;
        }
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        (i, ((target - self.cumulative[i]) / seg).clamp(0.0, 1.0))
    }

    pub fn point_xyz(&self, s: f64) -> Vec3 {
        if self.trivial {
            return self.xyz[0];
        }
        let (i, f) = self.locate(s);
        slerp(&self.xyz[i], &self.xyz[i + 1], f)
    }

    pub fn point_at(&self, s: f64) -> SpherePoint {
        if self.trivial {
            return self.vertices[0];
        }
        if s <= 0.0 {
            return self.vertices[0];
        }
        if s >= 1.0 {
            return self.end();
        }
        SpherePoint::from_xyz(&self.point_xyz(s))
    }

    /// Derivative of the ambient position with respect to `s`, using the
    /// segment containing `s` (right-continuous at vertices unless `s = 1`).
    pub fn velocity_xyz(&self, s: f64) -> Vec3 {
        if self.trivial {
            return [0.0; 3];
        }
        let (i, f) = self.locate(s);
        let x = &self.xyz[i];
        let y = &self.xyz[i + 1];
        let seg_param = (self.cumulative[i + 1] - self.cumulative[i]) / self.length();
        let omega = dot(x, y).clamp(-1.0, 1.0).acos();
        if omega < 1e-12 {
            return scale(&sub(y, x), 1.0 / seg_param);
        }
        let so = omega.sin();
        let d = add(
            &scale(x, -((1.0 - f) * omega).cos() * omega / so),
            &scale(y, (f * omega).cos() * omega / so),
        );
        scale(&d, 1.0 / seg_param)
    }

    /// Chordal distance from `p` to the polyline.
    pub fn distance_to(&self, p: &SpherePoint) -> f64 {
        let q = p.to_xyz();
        self.distance_to_xyz(&q)
    }

    pub fn distance_to_xyz(&self, q: &Vec3) -> f64 {
        self.xyz
            .windows(2)
            .map(|w| arc_distance(q, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Dense samples with chordal spacing at most `spacing`.
    pub fn sample_xyz(&self, spacing: f64) -> Vec<Vec3> {
        let mut out = vec![self.xyz[0]];
        for (i, w) in self.xyz.windows(2).enumerate() {
            let seg = self.cumulative[i + 1] - self.cumulative[i];
            let k = ((seg / spacing).ceil() as usize).max(1);
            for j in 1..=k {
                out.push(slerp(&w[0], &w[1], j as f64 / k as f64));
            }
        }
        out
    }
}

impl Serialize for SpherePath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.trivial {
            self.vertices[..1].serialize(s)
        } else {
            self.vertices.serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for SpherePath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v: Vec<SpherePoint> = Vec::deserialize(d)?;
        match v.len() {
            0 => Err(de::Error::custom("empty path")),
            1 => Ok(SpherePath::trivial(v[0])),
            _ if v.windows(2).all(|w| w[0].approx_eq(&w[1], 1e-15)) => {
                Ok(SpherePath::trivial(v[0]))
            }
            _ => SpherePath::new(v).map_err(de::Error::custom),
        }
    }
}

/// Radial cutoff of the push vector field, as a function of `d/r ∈ [0,1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BumpProfile {
    /// `1 − (3s² − 2s³)`
    #[default]
    Smoothstep,
    /// `1 − (10s³ − 15s⁴ + 6s⁵)`, C² at both ends.
    Smootherstep,
}

impl BumpProfile {
    pub fn value(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return 0.0;
        }
        let s = s.max(0.0);
        match self {
            BumpProfile::Smoothstep => 1.0 - s * s * (3.0 - 2.0 * s),
            BumpProfile::Smootherstep => 1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s),
        }
    }
}

/// One marked point pushed along a path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Push {
    /// Identifier of the marked point (an index into the owner's marked set).
    pub mark: usize,
    pub path: SpherePath,
}

/// Flow of a time-dependent vector field supported in chordal `r`-tubes
/// around the push paths; pushes each path's start point along its path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPushIsotopy {
    pub pushes: Vec<Push>,
    pub tube_radius: f64,
    #[serde(default)]
    pub bump: BumpProfile,
}

const PUSH_STEP_TOLERANCE: f64 = 1e-12;

impl PointPushIsotopy {
    /// Checks the tube invariants: radius positive, tubes pairwise disjoint
    /// and disjoint from `protected`, with a 10% safety margin.
    pub fn new(
        pushes: Vec<Push>,
        tube_radius: f64,
        bump: BumpProfile,
        protected: &[SpherePoint],
    ) -> Result<Self, SphereError> {
        let iso = Self {
            pushes,
            tube_radius,
            bump,
        };
        iso.check_tubes(protected)?;
        Ok(iso)
    }

    pub fn identity() -> Self {
        Self {
            pushes: Vec::new(),
            tube_radius: 0.1,
            bump: BumpProfile::Smoothstep,
        }
    }

    pub fn active_pushes(&self) -> impl Iterator<Item = &Push> {
        self.pushes.iter().filter(|p| !p.path.is_trivial())
    }

    pub fn check_tubes(&self, protected: &[SpherePoint]) -> Result<(), SphereError> {
        let r = self.tube_radius;
        if !(r > 0.0) || r >= 1.0 {
            return Err(SphereError::TubeOverlap(format!("tube radius {r} not in (0,1)")));
        }
        let margin = 1.1;
        let samples: Vec<Vec<Vec3>> = self
            .active_pushes()
            .map(|p| p.path.sample_xyz(r / 10.0))
            .collect();
        let active: Vec<&Push> = self.active_pushes().collect();
        for (i, pi) in active.iter().enumerate() {
            for pj in active.iter().skip(i + 1) {
                let d = samples[i]
                    .iter()
                    .map(|q| pj.path.distance_to_xyz(q))
                    .fold(f64::INFINITY, f64::min);
                if d < 2.0 * r * margin {
                    return Err(SphereError::TubeOverlap(format!(
                        "paths of marks {} and {} are {d:.3e} apart",
                        pi.mark, pj.mark
                    )));
                }
            }
            for q in protected {
                let d = pi.path.distance_to(q);
                if d < r * margin {
                    return Err(SphereError::TubeOverlap(format!(
                        "path of mark {} passes {d:.3e} from protected point {q}",
                        pi.mark
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether `p` lies within the tube of some active path.
    pub fn in_tube(&self, p: &SpherePoint) -> bool {
        self.active_pushes()
            .any(|push| push.path.distance_to(p) < self.tube_radius)
    }

    /// Break points of the piecewise-smooth field in `[0,1]`.
    fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![0.0, 1.0];
        for p in self.active_pushes() {
            b.extend(p.path.vertex_params());
        }
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.dedup_by(|x, y| (*x - *y).abs() < 1e-15);
        b
    }

    fn rk4(&self, t: f64, h: f64, x: &Vec3, tm: f64) -> Vec3 {
        // `tm` is a time strictly inside the current smooth piece; segment
        // lookups use it so that stages at the piece ends stay on this piece
        let eval = |tt: f64, y: &Vec3| self.field_on_piece(tt, tm, y);
        let k1 = eval(t, x);
        let k2 = eval(t + h / 2.0, &add(x, &scale(&k1, h / 2.0)));
        let k3 = eval(t + h / 2.0, &add(x, &scale(&k2, h / 2.0)));
        let k4 = eval(t + h, &add(x, &scale(&k3, h)));
        let inc = add(&add(&k1, &scale(&k2, 2.0)), &add(&scale(&k3, 2.0), &k4));
        normalize(&add(x, &scale(&inc, h / 6.0)))
    }

    /// Field on the smooth piece containing `tm`, extended analytically to `t`.
    fn field_on_piece(&self, t: f64, tm: f64, x: &Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for push in self.active_pushes() {
            let (c, vel) = push.path.piece_state(t, tm);
            let d = norm(&sub(x, &c));
            let w = self.bump.value(d / self.tube_radius);
            if w == 0.0 {
                continue;
            }
            out = add(&out, &scale(&transport(&c, x, &vel), w));
        }
        out
    }

    fn integrate_piece(&self, x: Vec3, t0: f64, t1: f64) -> Vec3 {
        let tm = 0.5 * (t0 + t1);
        let mut x = x;
        let mut t = t0;
        let dir = (t1 - t0).signum();
        let mut h = (t1 - t0) / 8.0;
        while (t1 - t) * dir > 1e-15 {
            if (t + h - t1) * dir > 0.0 {
                h = t1 - t;
            }
            let big = self.rk4(t, h, &x, tm);
            let half = self.rk4(t, h / 2.0, &x, tm);
            let small = self.rk4(t + h / 2.0, h / 2.0, &half, tm);
            let err = norm(&sub(&big, &small));
            if err < PUSH_STEP_TOLERANCE || h.abs() < 1e-9 {
                x = small;
                t += h;
                let grow = if err > 0.0 {
                    (PUSH_STEP_TOLERANCE / err).powf(0.2).min(4.0)
                } else {
                    4.0
                };
                h *= 0.9 * grow.max(0.5);
            } else {
                h *= (0.9 * (PUSH_STEP_TOLERANCE / err).powf(0.2)).max(0.1);
            }
        }
        x
    }

    /// Flows `p` from time `t0` to `t1` (either direction).
    pub fn flow(&self, p: &SpherePoint, t0: f64, t1: f64) -> Result<SpherePoint, SphereError> {
        for t in [t0, t1] {
            if !(0.0..=1.0).contains(&t) {
                return Err(SphereError::TimeOutOfRange(t));
            }
        }
        if t0 == t1 || !self.in_tube(p) {
            return Ok(*p);
        }
        let bps = self.breakpoints();
        let mut x = p.to_xyz();
        if t1 > t0 {
            for w in bps.windows(2) {
                let (a, b) = (w[0].max(t0), w[1].min(t1));
                if b > a {
                    x = self.integrate_piece(x, a, b);
                }
            }
        } else {
            for w in bps.windows(2).rev() {
                let (a, b) = (w[0].max(t1), w[1].min(t0));
                if b > a {
                    x = self.integrate_piece(x, b, a);
                }
            }
        }
        Ok(SpherePoint::from_xyz(&x))
    }

    /// `σ_t(p)`: the time-`t` map of the push flow.
    pub fn evaluate(&self, t: f64, p: &SpherePoint) -> Result<SpherePoint, SphereError> {
        self.flow(p, 0.0, t)
    }

    /// Position at time `t` of the marked point pushed along `mark`'s path,
    /// obtained by flowing its start point.
    pub fn mark_position(&self, mark: usize, t: f64) -> Option<Result<SpherePoint, SphereError>> {
        let push = self.pushes.iter().find(|p| p.mark == mark)?;
        Some(self.evaluate(t, &push.path.start()))
    }
}

impl SpherePath {
    /// Position and velocity at time `t` on the geodesic piece containing `tm`.
    fn piece_state(&self, t: f64, tm: f64) -> (Vec3, Vec3) {
        if self.trivial {
            return (self.xyz[0], [0.0; 3]);
        }
        let (i, _) = self.locate(tm);
        let l = self.length();
        let s0 = self.cumulative[i] / l;
        let s1 = self.cumulative[i + 1] / l;
        let f = (t - s0) / (s1 - s0);
        let x = &self.xyz[i];
        let y = &self.xyz[i + 1];
        let omega = dot(x, y).clamp(-1.0, 1.0).acos();
        let so = omega.sin();
        let pos = add(
            &scale(x, ((1.0 - f) * omega).sin() / so),
            &scale(y, (f * omega).sin() / so),
        );
        let vel = add(
            &scale(x, -((1.0 - f) * omega).cos() * omega / so),
            &scale(y, (f * omega).cos() * omega / so),
        );
        (pos, scale(&vel, 1.0 / (s1 - s0)))
    }
}

/// Parallel transport of the tangent vector `w` at `a` to `b` along the
/// shortest geodesic.
fn transport(a: &Vec3, b: &Vec3, w: &Vec3) -> Vec3 {
    let n = cross(a, b);
    let s = norm(&n);
    let c = dot(a, b).clamp(-1.0, 1.0);
    if s < 1e-15 {
        return *w;
    }
    let n = scale(&n, 1.0 / s);
    // Rodrigues rotation about n by the angle between a and b
    let t1 = scale(w, c);
    let t2 = scale(&cross(&n, w), s);
    let t3 = scale(&n, dot(&n, w) * (1.0 - c));
    add(&add(&t1, &t2), &t3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn chordal_examples() {
        let zero = SpherePoint::real(0.0);
        assert_eq!(zero.chordal(&zero), 0.0);
        assert!((zero.chordal(&SpherePoint::infinity()) - 2.0).abs() < 1e-15);
        // 2|z−w|/√((1+|z|²)(1+|w|²)) at z = 1, w = −1
        let direct = 2.0 * 2.0 / (2.0f64 * 2.0).sqrt();
        let d = SpherePoint::real(1.0).chordal(&SpherePoint::real(-1.0));
        assert!((d - direct).abs() < 1e-15);
        assert!((d - 2.0).abs() < 1e-15);
    }

    #[test]
    fn xyz_roundtrip_and_chordal_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z = SpherePoint::finite(c(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)));
            let w = SpherePoint::finite(c(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)));
            let back = SpherePoint::from_xyz(&z.to_xyz());
            assert!(back.chordal(&z) < 1e-13);
            let e = norm(&sub(&z.to_xyz(), &w.to_xyz()));
            assert!((e - z.chordal(&w)).abs() < 1e-12);
        }
        let inf = SpherePoint::infinity();
        assert!(SpherePoint::from_xyz(&inf.to_xyz()).is_infinity());
    }

    #[test]
    fn triples_identity_and_flip() {
        let std = [
            SpherePoint::real(0.0),
            SpherePoint::real(1.0),
            SpherePoint::infinity(),
        ];
        let id = MobiusMap::from_triples(&std, &std).unwrap();
        assert!(id.approx_eq(&MobiusMap::identity(), 1e-14));

        // z ↦ 1 − z sends (0,1,∞) to (1,0,∞)
        let dst = [
            SpherePoint::real(1.0),
            SpherePoint::real(0.0),
            SpherePoint::infinity(),
        ];
        let m = MobiusMap::from_triples(&std, &dst).unwrap();
        let expected = MobiusMap::new(c(-1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)).unwrap();
        assert!(m.approx_eq(&expected, 1e-14));
        for i in 0..3 {
            assert!(m.apply(&std[i]).chordal(&dst[i]) < 1e-12);
        }
    }

    #[test]
    fn degenerate_triple() {
        let src = [
            SpherePoint::real(0.0),
            SpherePoint::real(0.0),
            SpherePoint::infinity(),
        ];
        let dst = [
            SpherePoint::real(0.0),
            SpherePoint::real(1.0),
            SpherePoint::infinity(),
        ];
        assert_eq!(
            MobiusMap::from_triples(&src, &dst),
            Err(SphereError::DegenerateTriple(0, 1))
        );
    }

    #[test]
    fn mobius_normalization_sign() {
        let m = MobiusMap::new(c(-2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-0.5, 0.0)).unwrap();
        assert!((m.a * m.d - m.b * m.c - C64::new(1.0, 0.0)).norm() < 1e-14);
        assert!(m.a.re >= 0.0);
    }

    fn random_point(rng: &mut ChaCha8Rng) -> SpherePoint {
        let x = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        SpherePoint::from_xyz(&x)
    }

    #[test]
    fn triples_compose_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = [random_point(&mut rng), random_point(&mut rng), random_point(&mut rng)];
            let b = [random_point(&mut rng), random_point(&mut rng), random_point(&mut rng)];
            let ab = MobiusMap::from_triples(&a, &b).unwrap();
            let ba = MobiusMap::from_triples(&b, &a).unwrap();
            let round = ba.compose(&ab);
            for _ in 0..100 {
                let p = random_point(&mut rng);
                assert!(round.apply(&p).chordal(&p) < 1e-10);
            }
            for i in 0..3 {
                assert!(ab.apply(&a[i]).chordal(&b[i]) < 1e-12);
            }
        }
    }

    #[test]
    fn centered_chart_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = random_point(&mut rng);
            let m = p.centered_chart();
            assert!(m.apply(&p).chordal(&SpherePoint::real(0.0)) < 1e-13);
            let x = random_point(&mut rng);
            let y = random_point(&mut rng);
            assert!((m.apply(&x).chordal(&m.apply(&y)) - x.chordal(&y)).abs() < 1e-12);
        }
    }

    #[test]
    fn json_points_and_paths() {
        let p: SpherePoint = serde_json::from_str("[1.5, -2.0]").unwrap();
        assert_eq!(p.affine().unwrap(), c(1.5, -2.0));
        let q: SpherePoint = serde_json::from_str("\"inf\"").unwrap();
        let near = SpherePoint::new(C64::new(1.0, 0.0), C64::new(1e-199, 1e-250));
        let back: SpherePoint = serde_json::from_str(&serde_json::to_string(&near).unwrap()).unwrap();
        assert!(back.chordal(&near) < 1e-15);
        assert!(q.is_infinity());
        let path: SpherePath = serde_json::from_str("[[1.4142135623730951, 0.0], \"inf\"]").unwrap();
        assert_eq!(path.vertices().len(), 2);
        assert_eq!(serde_json::to_string(&path).unwrap(), "[[1.4142135623730951,0.0],\"inf\"]");
        let t: SpherePath = serde_json::from_str("[[4.0, 0.0]]").unwrap();
        assert!(t.is_trivial());
        assert!(serde_json::from_str::<SpherePoint>("\"nan\"").is_err());
    }

    #[test]
    fn path_to_infinity_follows_real_ray() {
        let path = SpherePath::new(vec![SpherePoint::real(2.0_f64.sqrt()), SpherePoint::infinity()]).unwrap();
        for k in 1..10 {
            let z = path.point_at(k as f64 / 10.0).affine().unwrap();
            assert!(z.im.abs() < 1e-12 && z.re > 1.414);
        }
        assert!(path.point_at(1.0).is_infinity());
    }

    fn ray_push(r: f64) -> PointPushIsotopy {
        let path = SpherePath::new(vec![
            SpherePoint::infinity(),
            SpherePoint::real(3.0),
            SpherePoint::real(2.0_f64.sqrt()),
        ])
        .unwrap();
        PointPushIsotopy::new(
            vec![Push { mark: 0, path }],
            r,
            BumpProfile::Smoothstep,
            &[SpherePoint::real(1.0), SpherePoint::real(0.0)],
        )
        .unwrap()
    }

    #[test]
    fn push_identity_at_time_zero() {
        let iso = ray_push(0.1);
        let p = SpherePoint::real(5.0);
        assert_eq!(iso.evaluate(0.0, &p).unwrap(), p);
    }

    #[test]
    fn push_moves_marked_point_along_path() {
        let iso = ray_push(0.1);
        let start = iso.pushes[0].path.start();
        let end = iso.evaluate(1.0, &start).unwrap();
        assert!(end.chordal(&SpherePoint::real(2.0_f64.sqrt())) < 1e-8, "{}", end);
        for t in [0.25, 0.5, 0.75] {
            let p = iso.evaluate(t, &start).unwrap();
            assert!(p.chordal(&iso.pushes[0].path.point_at(t)) < 1e-8);
        }
    }

    #[test]
    fn push_is_reversible() {
        let iso = ray_push(0.15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let x = rng.gen_range(1.2..6.0);
            let y = rng.gen_range(-0.3..0.3);
            let p = SpherePoint::finite(c(x, y));
            let t = rng.gen_range(0.1..1.0);
            let fwd = iso.flow(&p, 0.0, t).unwrap();
            let back = iso.flow(&fwd, t, 0.0).unwrap();
            assert!(back.chordal(&p) < 1e-6);
        }
    }

    #[test]
    fn push_support_is_exact() {
        let iso = ray_push(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut checked = 0;
        while checked < 10_000 {
            let p = random_point(&mut rng);
            if iso.in_tube(&p) {
                continue;
            }
            let q = iso.evaluate(rng.gen_range(0.0..1.0), &p).unwrap();
            assert_eq!(q.chordal(&p), 0.0);
            checked += 1;
        }
    }

    #[test]
    fn push_injective_on_samples() {
        let iso = ray_push(0.2);
        let pts: Vec<SpherePoint> = (0..40)
            .map(|k| SpherePoint::finite(c(1.5 + 0.1 * k as f64, 0.05)))
            .collect();
        let imgs: Vec<SpherePoint> = pts.iter().map(|p| iso.evaluate(0.6, p).unwrap()).collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert!(imgs[i].chordal(&imgs[j]) > 1e-6);
            }
        }
    }

    #[test]
    fn protected_point_in_tube_is_rejected() {
        let path = SpherePath::new(vec![SpherePoint::real(3.0), SpherePoint::real(1.0)]).unwrap();
        let err = PointPushIsotopy::new(
            vec![Push { mark: 0, path }],
            0.1,
            BumpProfile::Smoothstep,
            &[SpherePoint::real(2.0)],
        )
        .unwrap_err();
        assert!(matches!(err, SphereError::TubeOverlap(_)));
    }

    #[test]
    fn overlapping_tubes_are_rejected() {
        let a = SpherePath::new(vec![SpherePoint::real(2.0), SpherePoint::real(3.0)]).unwrap();
        let b = SpherePath::new(vec![SpherePoint::finite(c(2.0, 0.05)), SpherePoint::finite(c(3.0, 0.05))]).unwrap();
        let err = PointPushIsotopy::new(
            vec![Push { mark: 0, path: a }, Push { mark: 1, path: b }],
            0.1,
            BumpProfile::Smoothstep,
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, SphereError::TubeOverlap(_)));
    }

    proptest! {
        #[test]
        fn chordal_is_a_metric(
            a in (-3.0f64..3.0, -3.0f64..3.0),
            b in (-3.0f64..3.0, -3.0f64..3.0),
            w in (-3.0f64..3.0, -3.0f64..3.0),
        ) {
            let p = SpherePoint::finite(c(a.0, a.1));
            let q = SpherePoint::finite(c(b.0, b.1));
            let r = SpherePoint::finite(c(w.0, w.1));
            prop_assert!((p.chordal(&q) - q.chordal(&p)).abs() < 1e-15);
            prop_assert!(p.chordal(&r) <= p.chordal(&q) + q.chordal(&r) + 1e-12);
            prop_assert!(p.chordal(&q) <= 2.0);
        }

        #[test]
        fn arc_distance_bounded_by_endpoints(
            a in (-3.0f64..3.0, -3.0f64..3.0),
            b in (-3.0f64..3.0, -3.0f64..3.0),
            p in (-3.0f64..3.0, -3.0f64..3.0),
        ) {
            let a = SpherePoint::finite(c(a.0, a.1)).to_xyz();
            let b = SpherePoint::finite(c(b.0, b.1)).to_xyz();
            let p = SpherePoint::finite(c(p.0, p.1)).to_xyz();
            let d = arc_distance(&p, &a, &b);
            prop_assert!(d <= norm(&sub(&p, &a)) + 1e-12);
            // the sampled arc never gets closer than the exact distance
            for k in 0..=20 {
                let q = slerp(&a, &b, k as f64 / 20.0);
                prop_assert!(norm(&sub(&p, &q)) >= d - 1e-9);
            }
        }
    }
}
