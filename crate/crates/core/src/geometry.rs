//! Rigid-body kinematics primitives shared by the rest of the crate.
//!
//! Rotations are stored as unit quaternions and turned into matrices on
//! demand. Plane normals and line directions are parameterized with two
//! exponential coordinates `(w_x, w_y, 0)`, whose rotation carries the
//! global `z` axis onto the direction of interest.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;
use crate::friction::TongSample;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Below this rotation angle the closed forms switch to their series limits.
const SMALL_ANGLE: f64 = 1e-9;

/// Two exponential coordinates; the third component is fixed at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpCoords {
    pub w_x: f64,
    pub w_y: f64,
}

impl ExpCoords {
    pub const ZERO: ExpCoords = ExpCoords { w_x: 0.0, w_y: 0.0 };

    pub fn new(w_x: f64, w_y: f64) -> Self {
        Self { w_x, w_y }
    }

    pub fn as_vector(&self) -> Vec3 {
        Vec3::new(self.w_x, self.w_y, 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.w_x.hypot(self.w_y)
    }

    /// Coordinates whose rotation maps `z` onto `dir` (or onto `-dir` when
    /// that keeps the angle at most `pi/2`; callers treat axes as unsigned).
    pub fn from_axis(dir: &Vec3) -> Self {
        let mut n = dir.normalize();
        if n.z < 0.0 {
            n = -n;
        }
        let s = n.x.hypot(n.y);
        if s < SMALL_ANGLE {
            return Self::ZERO;
        }
        let theta = s.atan2(n.z);
        // n = (sin(t) * w_y / t, -sin(t) * w_x / t, cos(t))
        Self {
            w_x: -theta * n.y / s,
            w_y: theta * n.x / s,
        }
    }

    /// Same as [`from_axis`](Self::from_axis) but keeps the sign of `dir`.
    pub fn from_axis_signed(dir: &Vec3) -> Self {
        let n = dir.normalize();
        let s = n.x.hypot(n.y);
        if s < SMALL_ANGLE {
            if n.z >= 0.0 {
                return Self::ZERO;
            }
            return Self { w_x: PI, w_y: 0.0 };
        }
        let theta = s.atan2(n.z);
        Self {
            w_x: -theta * n.y / s,
            w_y: theta * n.x / s,
        }
    }

    /// Unit axis `e^{w~} z`.
    pub fn axis(&self) -> Vec3 {
        exp_so3(&self.as_vector()) * Vec3::z()
    }

    /// Rotation matrix without the range check of [`exp_map`].
    pub fn rotation(&self) -> Mat3 {
        exp_so3(&self.as_vector())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub t: f64,
    pub r: Vec3,
    pub q: Quat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WrenchSample {
    pub t: f64,
    pub f: Vec3,
    pub n: Vec3,
}

/// A recorded (or simulated) demonstration on a common clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub poses: Vec<PoseSample>,
    pub wrenches: Vec<WrenchSample>,
    pub tong: Option<Vec<TongSample>>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.poses.len();
        if self.wrenches.len() != n {
            return Err(GeometryError::LengthMismatch {
                poses: n,
                other: self.wrenches.len(),
            });
        }
        if let Some(tong) = &self.tong {
            if tong.len() != n {
                return Err(GeometryError::LengthMismatch {
                    poses: n,
                    other: tong.len(),
                });
            }
        }
        check_monotone(&self.poses)
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula for a full rotation vector.
pub fn exp_so3(v: &Vec3) -> Mat3 {
    let theta = v.norm();
    let k = skew(v);
    if theta < SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + a * k + b * k * k
}

/// Partial derivatives of `exp_so3(v)` with respect to each component of `v`.
///
/// Uses `dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2`, which reduces
/// to `[e_i]x` at the origin.
pub fn exp_so3_derivatives(v: &Vec3) -> [Mat3; 3] {
    let theta2 = v.norm_squared();
    let mut out = [Mat3::zeros(); 3];
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        for (i, d) in out.iter_mut().enumerate() {
            *d = skew(&Vec3::ith(i, 1.0));
        }
        return out;
    }
    let r = exp_so3(v);
    let vx = skew(v);
    let i_minus_r = Mat3::identity() - r;
    for (i, d) in out.iter_mut().enumerate() {
        let e = Vec3::ith(i, 1.0);
        let inner = v.cross(&(i_minus_r * e));
        *d = (v[i] * vx + skew(&inner)) * r / theta2;
    }
    out
}

/// Rotation for a pair of exponential coordinates; rejects `|w| >= pi`.
pub fn exp_map(w: &ExpCoords) -> Result<Mat3, GeometryError> {
    let norm = w.norm();
    if !norm.is_finite() || norm >= PI {
        return Err(GeometryError::ExpCoordsOutOfRange(norm));
    }
    Ok(exp_so3(&w.as_vector()))
}

/// Derivatives of `e^{w~}` with respect to `w_x` and `w_y`.
pub fn exp_map_derivatives(w: &ExpCoords) -> [Mat3; 2] {
    let [dx, dy, _] = exp_so3_derivatives(&w.as_vector());
    [dx, dy]
}

/// Rotation matrix of a quaternion; renormalizes the input first.
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let q = Quat::new_normalize(*q.quaternion());
    q.to_rotation_matrix().into_inner()
}

/// Angle of the relative rotation `conj(a) * b`, in `[0, pi]`.
pub fn quat_angle(a: &Quat, b: &Quat) -> f64 {
    // Components of conj(a) * b, written out so that a == b gives exactly 0.
    let (qa, qb) = (a.quaternion(), b.quaternion());
    let (va, vb) = (qa.vector(), qb.vector());
    let w = qa.coords.dot(&qb.coords).abs().min(1.0);
    let s = (vb * qa.w - va * qb.w - va.cross(&vb)).norm();
    2.0 * s.atan2(w)
}

/// Rotation vector (axis times angle) of a quaternion, with angle in `[0, pi]`.
pub fn quat_log(q: &Quat) -> Vec3 {
    let mut w = q.quaternion().scalar();
    let mut v = q.quaternion().vector().into_owned();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < SMALL_ANGLE {
        return 2.0 * v;
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

pub fn quat_exp(v: &Vec3) -> Quat {
    Quat::from_scaled_axis(*v)
}

pub fn axis_angle(axis: &Vec3, angle: f64) -> Quat {
    Quat::from_axis_angle(&Unit::new_normalize(*axis), angle)
}

/// Unit vectors `(u, v)` with `u x v = a`.
pub fn orthonormal_complement(a: &Vec3) -> (Vec3, Vec3) {
    let a = a.normalize();
    let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = helper.cross(&a).normalize();
    let v = a.cross(&u);
    (u, v)
}

/// Projects a 3x3 matrix onto the nearest rotation (SVD polar factor).
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

fn check_monotone(poses: &[PoseSample]) -> Result<(), GeometryError> {
    for (i, w) in poses.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(GeometryError::NonMonotoneTime { index: i + 1 });
        }
    }
    Ok(())
}

/// Linear and angular velocity of every pose sample, in the global frame.
///
/// Central differences in the interior, one-sided at the ends, followed by
/// a centered moving average of `window` samples. Angular velocity is the
/// rotation vector of `q_next * conj(q_prev)` divided by the time step.
pub fn finite_diff_velocity(
    poses: &[PoseSample],
    window: usize,
) -> Result<Vec<(Vec3, Vec3)>, GeometryError> {
    let n = poses.len();
    if n < 3 {
        return Err(GeometryError::TooFewSamples { needed: 3, got: n });
    }
    check_monotone(poses)?;

    let raw: Vec<(Vec3, Vec3)> = (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            let dt = poses[b].t - poses[a].t;
            let lin = (poses[b].r - poses[a].r) / dt;
            let rel = poses[b].q * poses[a].q.inverse();
            let ang = quat_log(&rel) / dt;
            (lin, ang)
        })
        .collect();

    let half = window.max(1) / 2;
    if half == 0 {
        return Ok(raw);
    }
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let count = (hi - lo + 1) as f64;
            let (mut lin, mut ang) = (Vec3::zeros(), Vec3::zeros());
            for (l, a) in &raw[lo..=hi] {
                lin += l;
                ang += a;
            }
            (lin / count, ang / count)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pose(t: f64, r: Vec3, q: Quat) -> PoseSample {
        PoseSample { t, r, q }
    }

    #[test]
    fn exp_map_zero_is_identity() {
        let m = exp_map(&ExpCoords::ZERO).unwrap();
        assert_relative_eq!(m, Mat3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn exp_map_quarter_turn_about_x() {
        let m = exp_map(&ExpCoords::new(PI / 2.0, 0.0)).unwrap();
        assert_relative_eq!(m * Vec3::z(), -Vec3::y(), epsilon = 1e-12);
    }

    #[test]
    fn exp_map_matches_axis_angle_quaternion() {
        let w = ExpCoords::new(0.3, 0.4);
        let m = exp_map(&w).unwrap();
        assert_relative_eq!(m * m.transpose(), Mat3::identity(), epsilon = 1e-12);
        // Independent route: quaternion from axis (0.6, 0.8, 0) and angle 0.5.
        let half = 0.25_f64;
        let q = nalgebra::Quaternion::new(half.cos(), 0.6 * half.sin(), 0.8 * half.sin(), 0.0);
        let q = Quat::new_unchecked(q);
        assert_relative_eq!(m * Vec3::z(), q * Vec3::z(), epsilon = 1e-12);
        assert_relative_eq!(w.axis(), q * Vec3::z(), epsilon = 1e-12);
    }

    #[test]
    fn exp_map_rejects_out_of_range() {
        assert!(exp_map(&ExpCoords::new(PI, 0.0)).is_err());
        assert!(exp_map(&ExpCoords::new(3.0, 1.0)).is_err());
        assert!(exp_map(&ExpCoords::new(f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn from_axis_roundtrip() {
        for dir in [Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.3, 0.1, 0.2), Vec3::z()] {
            let w = ExpCoords::from_axis(&dir);
            let n = dir.normalize();
            let got = w.axis();
            assert!(got.dot(&n).abs() > 1.0 - 1e-12);
            assert!(w.norm() <= PI / 2.0 + 1e-12);
        }
        let w = ExpCoords::from_axis_signed(&Vec3::new(0.2, -0.5, -0.8));
        assert_relative_eq!(w.axis(), Vec3::new(0.2, -0.5, -0.8).normalize(), epsilon = 1e-12);
    }

    #[test]
    fn quat_to_matrix_examples() {
        assert_relative_eq!(quat_to_matrix(&Quat::identity()), Mat3::identity());
        let h = 0.5_f64.sqrt();
        let q = Quat::new_unchecked(nalgebra::Quaternion::new(h, h, 0.0, 0.0));
        let m = quat_to_matrix(&q);
        assert_relative_eq!(m * Vec3::y(), Vec3::z(), epsilon = 1e-12);
        assert_relative_eq!(m * Vec3::z(), -Vec3::y(), epsilon = 1e-12);
        let neg = Quat::new_unchecked(-q.into_inner());
        assert_relative_eq!(quat_to_matrix(&neg), m, epsilon = 1e-15);
    }

    #[test]
    fn quat_angle_examples() {
        let q = axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.7);
        assert_eq!(quat_angle(&q, &q), 0.0);
        let x90 = axis_angle(&Vec3::x(), PI / 2.0);
        assert_relative_eq!(quat_angle(&Quat::identity(), &x90), PI / 2.0, epsilon = 1e-12);
        let neg = Quat::new_unchecked(-q.into_inner());
        assert!(quat_angle(&q, &neg) < 1e-12);
    }

    #[test]
    fn exp_derivatives_match_finite_differences() {
        for v in [Vec3::new(0.3, -0.2, 0.9), Vec3::new(1e-12, 0.0, 0.0), Vec3::new(2.5, 0.1, -0.4)] {
            let d = exp_so3_derivatives(&v);
            let h = 1e-6;
            for i in 0..3 {
                let e = Vec3::ith(i, h);
                let fd = (exp_so3(&(v + e)) - exp_so3(&(v - e))) / (2.0 * h);
                assert_relative_eq!(d[i], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn velocity_of_constant_pose_is_zero() {
        let q = axis_angle(&Vec3::new(0.1, 0.2, 0.3), 0.4);
        let poses: Vec<_> = (0..20)
            .map(|i| pose(i as f64 * 0.01, Vec3::new(1.0, 2.0, 3.0), q))
            .collect();
        for (v, w) in finite_diff_velocity(&poses, 5).unwrap() {
            assert!(v.norm() < 1e-12 && w.norm() < 1e-12);
        }
    }

    #[test]
    fn velocity_of_linear_motion() {
        let poses: Vec<_> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.01;
                pose(t, Vec3::new(t, 0.0, 0.0), Quat::identity())
            })
            .collect();
        let vel = finite_diff_velocity(&poses, 5).unwrap();
        for (v, _) in &vel[1..49] {
            assert_relative_eq!(*v, Vec3::x(), epsilon = 1e-9);
        }
    }

    #[test]
    fn velocity_of_spin_about_z() {
        let poses: Vec<_> = (0..100)
            .map(|i| {
                let t = i as f64 * 0.01;
                pose(t, Vec3::zeros(), axis_angle(&Vec3::z(), t))
            })
            .collect();
        let vel = finite_diff_velocity(&poses, 5).unwrap();
        for (_, w) in &vel {
            assert!((w - Vec3::z()).norm() < 1e-3);
        }
    }

    #[test]
    fn velocity_error_is_second_order() {
        // r(t) = (sin t, cos 2t, t^3/6)
        let err = |dt: f64| {
            let poses: Vec<_> = (0..(2.0 / dt) as usize)
                .map(|i| {
                    let t = i as f64 * dt;
                    pose(t, Vec3::new(t.sin(), (2.0 * t).cos(), t.powi(3) / 6.0), Quat::identity())
                })
                .collect();
            let vel = finite_diff_velocity(&poses, 5).unwrap();
            let mut worst = 0.0_f64;
            for i in 3..poses.len() - 3 {
                let t = poses[i].t;
                let exact = Vec3::new(t.cos(), -2.0 * (2.0 * t).sin(), t * t / 2.0);
                worst = worst.max((vel[i].0 - exact).norm());
            }
            worst
        };
        let e1 = err(0.02);
        let e2 = err(0.01);
        assert!(e1 / e2 > 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn velocity_rejects_non_monotone_time() {
        let mut poses: Vec<_> = (0..5)
            .map(|i| pose(i as f64, Vec3::zeros(), Quat::identity()))
            .collect();
        poses[3].t = 1.0;
        assert!(matches!(
            finite_diff_velocity(&poses, 5),
            Err(GeometryError::NonMonotoneTime { index: 3 })
        ));
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(a, b, c, d)| Quat::new_normalize(nalgebra::Quaternion::new(a, b, c, d)))
    }

    proptest! {
        #[test]
        fn rotation_matrices_are_orthonormal(q in arb_quat(), wx in -2.0..2.0f64, wy in -2.0..2.0f64) {
            let a = quat_to_matrix(&q);
            prop_assert!((a * a.transpose() - Mat3::identity()).norm() < 1e-10);
            prop_assert!(a.determinant() > 0.0);
            let w = ExpCoords::new(wx, wy);
            if let Ok(m) = exp_map(&w) {
                prop_assert!((m * m.transpose() - Mat3::identity()).norm() < 1e-10);
                prop_assert!(m.determinant() > 0.0);
            }
        }

        #[test]
        fn quat_angle_is_a_metric(a in arb_quat(), b in arb_quat(), c in arb_quat()) {
            let ab = quat_angle(&a, &b);
            prop_assert!((0.0..=PI + 1e-12).contains(&ab));
            prop_assert!((ab - quat_angle(&b, &a)).abs() < 1e-12);
            prop_assert!(ab <= quat_angle(&a, &c) + quat_angle(&c, &b) + 1e-9);
        }
    }
}
