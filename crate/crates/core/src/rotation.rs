//! Rotation parameterizations and their adjoints.
//!
//! Poses are optimized in the continuous 6D form (the first two columns of
//! the rotation matrix, Gram-Schmidt orthonormalized) and stored as 3x3
//! matrices. Gaussian orientations use unit quaternions in `(w, x, y, z)`
//! order.

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3, Vector4};

/// Six raw numbers: first column followed by second column.
pub type Rot6 = [f64; 6];

pub const IDENTITY_ROT6: Rot6 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

struct GramSchmidt {
    b1: Vector3<f64>,
    b2: Vector3<f64>,
    n1: f64,
    n2: f64,
    a2: Vector3<f64>,
}

fn gram_schmidt(raw: &Rot6) -> GramSchmidt {
    let a1 = Vector3::new(raw[0], raw[1], raw[2]);
    let a2 = Vector3::new(raw[3], raw[4], raw[5]);
    let n1 = a1.norm();
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let n2 = u.norm();
    let b2 = u / n2;
    GramSchmidt { b1, b2, n1, n2, a2 }
}

pub fn rot6_to_matrix(raw: &Rot6) -> Matrix3<f64> {
    let gs = gram_schmidt(raw);
    let b3 = gs.b1.cross(&gs.b2);
    Matrix3::from_columns(&[gs.b1, gs.b2, b3])
}

pub fn matrix_to_rot6(r: &Matrix3<f64>) -> Rot6 {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Pulls a gradient with respect to the rotation matrix back to the raw 6D
/// parameters.
pub fn rot6_backward(raw: &Rot6, d_r: &Matrix3<f64>) -> Rot6 {
    let gs = gram_schmidt(raw);
    let (b1, b2) = (gs.b1, gs.b2);
    let mut db1: Vector3<f64> = d_r.column(0).into();
    let mut db2: Vector3<f64> = d_r.column(1).into();
    let db3: Vector3<f64> = d_r.column(2).into();

    // b3 = b1 x b2
    db1 += b2.cross(&db3);
    db2 += db3.cross(&b1);

    let du = (db2 - b2 * b2.dot(&db2)) / gs.n2;
    let proj = b1.dot(&gs.a2);
    let da2 = du - b1 * b1.dot(&du);
    db1 += -du * proj - gs.a2 * b1.dot(&du);
    let da1 = (db1 - b1 * b1.dot(&db1)) / gs.n1;

    [da1.x, da1.y, da1.z, da2.x, da2.y, da2.z]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
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

/// Adjoint of [`quat_to_matrix`], treating the quaternion entries as free.
pub fn quat_to_matrix_backward(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Vector4::new(dw, dx, dy, dz)
}

/// Quaternion `(w, x, y, z)` for a rotation of `angle` radians about `axis`.
pub fn axis_angle_quat(axis: &Vector3<f64>, angle: f64) -> Vector4<f64> {
    let q = UnitQuaternion::from_axis_angle(&Unit::new_normalize(*axis), angle);
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// Rodrigues' formula; the zero vector maps to the identity.
pub fn axis_angle_matrix(rotvec: &Vector3<f64>) -> Matrix3<f64> {
    let angle = rotvec.norm();
    if angle < 1e-12 {
        return Matrix3::identity();
    }
    let k = rotvec / angle;
    let kx = k.cross_matrix();
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Geodesic angle of a rotation matrix, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

/// Checks orthonormality and a positive determinant within `tol`.
pub fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<(), String> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err("non-finite entry".into());
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > tol {
        return Err(format!("not orthonormal (max |R^T R - I| = {err:.3e})"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(format!("determinant {det:.6} is not +1"));
    }
    Ok(())
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    axis_angle_matrix(&Vector3::new(0.0, 0.0, angle))
}
