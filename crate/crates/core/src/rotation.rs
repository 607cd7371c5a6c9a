//! Small SO(3) helpers shared by the likelihood, IK and I/O code.
//!
//! Orientation errors are always expressed as the rotation vector of the
//! relative rotation `R_a * R_b^T`, i.e. in the world frame.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

/// Flips the quaternion so that its scalar part is non-negative.
pub fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Rotation vector of `a * b^-1`.
pub fn rotation_error(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> Vector3<f64> {
    canonical(a * b.inverse()).scaled_axis()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of the left Jacobian of SO(3) at rotation vector `phi`.
///
/// If `R' = exp(d) R` then `log(R') ≈ log(R) + J_l^{-1}(log R) d`.
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let coeff = if theta < 1e-5 {
        // series of 1/θ² − (1 + cos θ) / (2 θ sin θ)
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - 0.5 * k + coeff * k * k
}
