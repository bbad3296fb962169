//! Rigid-body and quaternion math used across the pipeline: SE(3)
//! composition, relative transforms between stamped camera poses,
//! quaternion conversions and the horizontal-mirror conjugation used by
//! the augmented dataset.

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

/// Orthogonality/determinant tolerance for poses produced by internal math.
pub const INTERNAL_TOL: f64 = 1e-9;
/// Looser tolerance for poses parsed from 6-significant-digit text files.
pub const FILE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthogonal: max |R'R - I| = {deviation:e} (tol {tol:e})")]
    NotOrthogonal { deviation: f64, tol: f64 },
    #[error("rotation determinant is {det}, expected +1")]
    NotProper { det: f64 },
    #[error("quaternion norm {norm} is too far from 1")]
    NonUnitQuaternion { norm: f64 },
}

/// Rigid transform acting as `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Checks orthogonality and determinant of the rotation part.
    pub fn validate(&self, tol: f64) -> Result<(), GeometryError> {
        let dev = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if dev > tol {
            return Err(GeometryError::NotOrthogonal {
                deviation: dev,
                tol,
            });
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol.max(1e-6) {
            return Err(GeometryError::NotProper { det });
        }
        Ok(())
    }

    /// Functional composition: `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Unit quaternion in (w, x, y, z) order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn identity() -> Self {
        Quaternion::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quaternion {
        let n = self.norm();
        Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Resolves the double cover: w > 0, ties broken by the first nonzero
    /// component being positive.
    pub fn canonicalized(&self) -> Quaternion {
        let c = [self.w, self.x, self.y, self.z];
        for v in c {
            if v > 0.0 {
                return *self;
            }
            if v < 0.0 {
                return Quaternion::new(-self.w, -self.x, -self.y, -self.z);
            }
        }
        *self
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Shepperd's method: branch on the largest of trace and diagonal
    /// entries, which stays well-conditioned near 180-degree rotations.
    pub fn from_rotation(m: &Matrix3<f64>) -> Quaternion {
        let t = m.trace();
        let q = if t > m[(0, 0)] && t > m[(1, 1)] && t > m[(2, 2)] {
            let s = (t + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized()
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        let Quaternion { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }
}

/// Relative motion target: translation plus unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionLabel {
    pub x: Vector3<f64>,
    pub q: Quaternion,
}

impl MotionLabel {
    pub fn identity() -> Self {
        MotionLabel {
            x: Vector3::zeros(),
            q: Quaternion::identity(),
        }
    }
}

/// The horizontal-mirror conjugation matrix diag(-1, 1, 1).
pub fn mirror_matrix() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0))
}

/// Relative transform `a^{-1} ∘ b` between two stamped poses.
pub fn relative_transform(a: &Pose, b: &Pose) -> Result<Pose, GeometryError> {
    a.validate(FILE_TOL)?;
    b.validate(FILE_TOL)?;
    Ok(a.inverse().compose(b))
}

pub fn pose_to_label(p: &Pose) -> MotionLabel {
    MotionLabel {
        x: p.translation,
        q: Quaternion::from_rotation(&p.rotation).canonicalized(),
    }
}

pub fn label_to_pose(l: &MotionLabel) -> Pose {
    Pose {
        rotation: l.q.normalized().to_rotation(),
        translation: l.x,
    }
}

/// Mirror conjugation of a relative transform: rotation becomes M·R·M,
/// translation is kept as-is.
pub fn mirror_transform(p: &Pose) -> Pose {
    let m = mirror_matrix();
    Pose {
        rotation: m * p.rotation * m,
        translation: p.translation,
    }
}

/// Chains relative motion labels into absolute poses, starting at the
/// identity. Quaternions further than 1e-3 from unit norm are reported at
/// warning level before renormalization.
pub fn compose_trajectory(rel: &[MotionLabel]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(rel.len() + 1);
    out.push(Pose::identity());
    for (i, label) in rel.iter().enumerate() {
        let n = label.q.norm();
        if (n - 1.0).abs() > 1e-3 {
            log::warn!("label {i}: quaternion norm {n} off unit, renormalizing");
        }
        let step = label_to_pose(label);
        let prev = out.last().unwrap();
        out.push(prev.compose(&step));
    }
    out
}

/// Rotation angle in [0, π] via the trace formula, acos argument clamped.
pub fn rotation_angle(m: &Matrix3<f64>) -> f64 {
    // atan2 of the antisymmetric part against the trace is well
    // conditioned near the identity, where acos((tr-1)/2) loses half the
    // significant digits; a numerically symmetric matrix maps to exactly
    // zero.
    let s = 0.5
        * ((m[(2, 1)] - m[(1, 2)]).powi(2)
            + (m[(0, 2)] - m[(2, 0)]).powi(2)
            + (m[(1, 0)] - m[(0, 1)]).powi(2))
        .sqrt();
    let c = (m.trace() - 1.0) / 2.0;
    s.atan2(c)
}

/// Rotation of `angle` radians about the x axis.
pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation of `angle` radians about the y axis.
pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation of `angle` radians about the z axis.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// 4x4 homogeneous-matrix oracle for composition/inversion.
    fn oracle_relative(a: &Pose, b: &Pose) -> Matrix4<f64> {
        a.to_homogeneous().try_inverse().unwrap() * b.to_homogeneous()
    }

    /// Axis-angle quaternion oracle.
    fn quat_from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quaternion {
        let a = axis.normalize() * (angle / 2.0).sin();
        Quaternion::new((angle / 2.0).cos(), a.x, a.y, a.z)
    }

    fn max_pose_diff(p: &Pose, q: &Pose) -> f64 {
        (p.to_homogeneous() - q.to_homogeneous())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn relative_transform_identity_cases() {
        let id = Pose::identity();
        let r = relative_transform(&id, &id).unwrap();
        assert_eq!(max_pose_diff(&r, &id), 0.0);

        let b = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0));
        let r = relative_transform(&id, &b).unwrap();
        assert_abs_diff_eq!(r.translation.z, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn relative_transform_rotated_frames() {
        // a = rot_z(90°); b = rot_z(90°) then world translation (1,0,0).
        let a = Pose::new(rot_z(FRAC_PI_2), Vector3::zeros());
        let b = Pose::new(rot_z(FRAC_PI_2), Vector3::new(1.0, 0.0, 0.0));
        let r = relative_transform(&a, &b).unwrap();
        let o = oracle_relative(&a, &b);
        assert!((r.to_homogeneous() - o).norm() < 1e-12);
        assert_abs_diff_eq!(r.translation.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.translation.y, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.translation.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_transform_rejects_bad_rotation() {
        let mut bad = Pose::identity();
        bad.rotation[(0, 0)] = 1.5;
        assert!(relative_transform(&bad, &Pose::identity()).is_err());
    }

    #[test]
    fn pose_label_round_trip_basics() {
        let l = pose_to_label(&Pose::identity());
        assert_eq!(l.x, Vector3::zeros());
        assert_eq!(l.q.as_array(), [1.0, 0.0, 0.0, 0.0]);

        // 180° about z: oracle gives (0, 0, 0, 1).
        let p = Pose::new(rot_z(PI), Vector3::zeros());
        let l = pose_to_label(&p);
        let oracle = quat_from_axis_angle(Vector3::z(), PI).canonicalized();
        for (a, b) in l.q.as_array().iter().zip(oracle.as_array()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(l.q.z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn canonicalization_flips_negative_w() {
        let q = Quaternion::new(-1.0, 0.0, 0.0, 0.0).canonicalized();
        assert_eq!(q.as_array(), [1.0, 0.0, 0.0, 0.0]);
        // w = 0 tie broken by the first nonzero component.
        let q = Quaternion::new(0.0, -0.6, 0.8, 0.0).canonicalized();
        assert!(q.x > 0.0);
    }

    #[test]
    fn mirror_transform_examples() {
        let id = mirror_transform(&Pose::identity());
        assert_eq!(max_pose_diff(&id, &Pose::identity()), 0.0);

        let p = Pose::new(rot_y(FRAC_PI_2), Vector3::new(0.0, 0.0, 1.0));
        let m = mirror_transform(&p);
        let oracle = mirror_matrix() * rot_y(FRAC_PI_2) * mirror_matrix();
        assert!((m.rotation - oracle).norm() < 1e-15);
        assert!((m.rotation - rot_y(-FRAC_PI_2)).norm() < 1e-12);
        assert_eq!(m.translation, p.translation);

        // Exact involution: M is a ±1 diagonal.
        let twice = mirror_transform(&mirror_transform(&p));
        assert_eq!(max_pose_diff(&twice, &p), 0.0);
    }

    #[test]
    fn compose_trajectory_examples() {
        assert_eq!(compose_trajectory(&[]).len(), 1);

        let step = MotionLabel {
            x: Vector3::new(0.0, 0.0, 1.0),
            q: Quaternion::identity(),
        };
        let traj = compose_trajectory(&[step, step, step]);
        for (k, p) in traj.iter().enumerate() {
            assert_abs_diff_eq!(p.translation.z, k as f64, epsilon = 1e-12);
        }

        // Four rot_y(90°)+forward steps close a square loop.
        let turn = MotionLabel {
            x: Vector3::new(0.0, 0.0, 1.0),
            q: quat_from_axis_angle(Vector3::y(), FRAC_PI_2),
        };
        let traj = compose_trajectory(&[turn, turn, turn, turn]);
        // Oracle: explicit homogeneous chain.
        let mut m = Matrix4::identity();
        for _ in 0..4 {
            m *= label_to_pose(&turn).to_homogeneous();
        }
        assert!((traj[4].to_homogeneous() - m).norm() < 1e-12);
        assert!(traj[4].translation.norm() < 1e-9);
    }

    #[test]
    fn rotation_angle_bounds() {
        assert_eq!(rotation_angle(&Matrix3::identity()), 0.0);
        assert_abs_diff_eq!(rotation_angle(&rot_z(PI)), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(rotation_angle(&rot_x(0.3)), 0.3, epsilon = 1e-12);
    }

    prop_compose! {
        fn arb_rotation()(ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64,
                          angle in -PI..PI) -> Matrix3<f64> {
            let axis = Vector3::new(ax, ay, az);
            if axis.norm() < 1e-3 {
                Matrix3::identity()
            } else {
                quat_from_axis_angle(axis, angle).to_rotation()
            }
        }
    }

    prop_compose! {
        fn arb_pose()(r in arb_rotation(),
                      tx in -10.0..10.0f64, ty in -10.0..10.0f64, tz in -10.0..10.0f64)
                      -> Pose {
            Pose::new(r, Vector3::new(tx, ty, tz))
        }
    }

    proptest! {
        #[test]
        fn relative_then_compose_recovers(a in arb_pose(), b in arb_pose()) {
            let rel = relative_transform(&a, &b).unwrap();
            let back = a.compose(&rel);
            prop_assert!(max_pose_diff(&back, &b) < 1e-9);
        }

        #[test]
        fn mirror_preserves_so3(p in arb_pose()) {
            let m = mirror_transform(&p);
            prop_assert!(m.validate(1e-12).is_ok());
        }

        #[test]
        fn label_round_trip(p in arb_pose()) {
            let back = label_to_pose(&pose_to_label(&p));
            prop_assert!(max_pose_diff(&back, &p) < 1e-9);
        }

        #[test]
        fn quaternion_is_canonical(p in arb_pose()) {
            let q = pose_to_label(&p).q;
            prop_assert!(q.w >= 0.0);
            prop_assert!((q.norm() - 1.0).abs() < 1e-9);
        }
    }
}
