//! Small SO(3) toolbox shared by preintegration, estimation and evaluation.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Cross-product matrix, `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(phi: &Vec3) -> Quat {
    UnitQuaternion::from_scaled_axis(*phi)
}

/// Rotation vector of `q`, with angle in `[0, pi]`.
pub fn so3_log(q: &Quat) -> Vec3 {
    // Keep the scalar part non-negative so the angle stays in [0, pi].
    let q = if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    };
    q.scaled_axis()
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Mat3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let half = 0.5 * theta;
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    // Near theta = pi the closed form loses precision; fall back to cot form.
    let coeff = if coeff.is_finite() {
        coeff
    } else {
        (1.0 - half / half.tan()) / (theta * theta)
    };
    Mat3::identity() + 0.5 * k + coeff * k * k
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle(a: &Quat, b: &Quat) -> f64 {
    a.angle_to(b)
}

/// Rotation about world z.
pub fn yaw_rotation(yaw: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
}

/// Z-Y-X Euler composition `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn from_ypr(yaw: f64, pitch: f64, roll: f64) -> Quat {
    UnitQuaternion::from_euler_angles(roll, pitch, yaw)
}

pub fn quat_to_mat(q: &Quat) -> Mat3 {
    q.to_rotation_matrix().into_inner()
}

pub fn mat_to_quat(m: &Mat3) -> Quat {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m))
}
