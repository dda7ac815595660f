//! Rigid-body poses on SE(3).
//!
//! Poses are camera-to-world unless stated otherwise. Tangent vectors are
//! ordered `[rho, phi]`: translational part first, rotational part second.
//! Retraction is right-multiplicative, `T <- T * Exp(xi)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};
use std::ops::Mul;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let w = skew(phi);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() + 0.5 * w + w * w / 6.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity()
        + (1.0 - theta.cos()) / theta2 * w
        + (theta - theta.sin()) / (theta2 * theta) * (w * w)
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let w = skew(phi);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() - 0.5 * w + w * w / 12.0;
    }
    let theta = theta2.sqrt();
    let coeff = (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2;
    Matrix3::identity() - 0.5 * w + coeff * (w * w)
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from raw quaternion components `(qx, qy, qz, qw)`, renormalizing.
    pub fn from_parts(t: [f64; 3], q: [f64; 4]) -> Self {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        Self::new(
            UnitQuaternion::from_quaternion(quat),
            Vector3::new(t[0], t[1], t[2]),
        )
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -(r * self.translation))
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// SE(3) exponential of `[rho, phi]`.
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let rho = xi.fixed_rows::<3>(0).into_owned();
        let phi = xi.fixed_rows::<3>(3).into_owned();
        let rotation = UnitQuaternion::from_scaled_axis(phi);
        Self::new(rotation, so3_left_jacobian(&phi) * rho)
    }

    /// SE(3) logarithm, inverse of [`Pose::exp`] for rotation angles below pi.
    pub fn log(&self) -> Vector6<f64> {
        let phi = self.rotation.scaled_axis();
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&rho);
        out.fixed_rows_mut::<3>(3).copy_from(&phi);
        out
    }

    /// `self * Exp(xi)`, renormalizing the quaternion.
    pub fn retract(&self, xi: &Vector6<f64>) -> Self {
        let mut p = *self * Self::exp(xi);
        p.renormalize();
        p
    }

    pub fn renormalize(&mut self) {
        self.rotation = UnitQuaternion::from_quaternion(*self.rotation.quaternion());
    }

    /// Geodesic rotation angle in radians.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Interpolates with slerp on rotation and linear blending on translation.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        let rotation = self
            .rotation
            .try_slerp(&other.rotation, s, 1e-12)
            .unwrap_or(self.rotation);
        Pose::new(
            rotation,
            self.translation + (other.translation - self.translation) * s,
        )
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

impl Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        *self * *rhs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tangent() -> impl Strategy<Value = Vector6<f64>> {
        proptest::array::uniform6(-1.0f64..1.0).prop_map(|a| Vector6::from_row_slice(&a))
    }

    proptest! {
        #[test]
        fn exp_log_roundtrip(xi in tangent()) {
            let back = Pose::exp(&xi).log();
            prop_assert!((back - xi).norm() < 1e-9);
        }

        #[test]
        fn inverse_composes_to_identity(xi in tangent()) {
            let p = Pose::exp(&xi);
            let e = (p * p.inverse()).log();
            prop_assert!(e.norm() < 1e-12);
        }
    }

    #[test]
    fn small_angle_exp_is_continuous() {
        let xi = Vector6::new(0.1, -0.2, 0.3, 1e-10, 0.0, -1e-10);
        let p = Pose::exp(&xi);
        assert!((p.translation - Vector3::new(0.1, -0.2, 0.3)).norm() < 1e-9);
    }

    #[test]
    fn retract_keeps_unit_quaternion() {
        let mut p = Pose::identity();
        for i in 0..1000 {
            let xi = Vector6::new(0.01, 0.0, 0.0, 0.013 * (i as f64).sin(), 0.02, 0.001);
            p = p.retract(&xi);
        }
        assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
    }
}
