//! Pushes ∞ to √2 along the real axis and follows a few points through the
//! isotopy.

use semiconj::sphere::{BumpProfile, PointPushIsotopy, Push, SpherePath, SpherePoint};

fn main() {
    let path = SpherePath::new(vec![SpherePoint::infinity(), SpherePoint::real(2.0f64.sqrt())]).unwrap();
    let protected = [SpherePoint::real(1.0), SpherePoint::real(0.0), SpherePoint::real(-1.0)];
    let iso = PointPushIsotopy::new(vec![Push { mark: 0, path }], 0.1, BumpProfile::Smoothstep, &protected).unwrap();
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mark = iso.mark_position(0, t).unwrap().unwrap();
        println!("t={t:.2} mark at {mark}");
    }
    for p in [SpherePoint::real(3.0), SpherePoint::real(1.0), SpherePoint::finite(num_complex::Complex64::new(5.0, 0.05))] {
        let q = iso.evaluate(1.0, &p).unwrap();
        println!("{p} -> {q} (moved {:.3e}, in tube {})", p.chordal(&q), iso.in_tube(&p));
    }
}
