//! Perspective projection of 3D Gaussians with the local affine (EWA)
//! approximation.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{Camera, LOW_PASS, MIN_DETERMINANT, WEIGHT_CUTOFF};
use crate::gaussian::GaussianSet;

#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    /// Absolute pixel position of the projected mean.
    pub mean2d: Vector2<f64>,
    /// `mean2d` minus the principal point.
    pub offset: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub visible: bool,
    /// Pixel radius outside of which this Gaussian's weight is below the
    /// compositing cutoff. Zero when it can never contribute.
    pub radius: f64,
    pub(crate) cam_point: Vector3<f64>,
    pub(crate) cov_cam: Matrix3<f64>,
    pub(crate) jacobian: Matrix2x3<f64>,
}

impl Projected {
    fn culled(depth: f64, cam_point: Vector3<f64>) -> Self {
        Self {
            mean2d: Vector2::repeat(f64::NAN),
            offset: Vector2::repeat(f64::NAN),
            cov2d: Matrix2::zeros(),
            conic: Matrix2::zeros(),
            depth,
            visible: false,
            radius: 0.0,
            cam_point,
            cov_cam: Matrix3::zeros(),
            jacobian: Matrix2x3::zeros(),
        }
    }
}

pub(crate) fn project_one(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    opacity: f64,
    cam: &Camera,
    rot: &Matrix3<f64>,
    trans: &Vector3<f64>,
) -> Projected {
    let t = rot * mean + trans;
    if !(t.z > cam.near) {
        return Projected::culled(t.z, t);
    }
    let inv_z = 1.0 / t.z;
    let offset = Vector2::new(cam.fx * t.x * inv_z, cam.fy * t.y * inv_z);
    let jacobian = Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * t.x * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * t.y * inv_z * inv_z,
    );
    let cov_cam = rot * cov * rot.transpose();
    let mut cov2d = jacobian * cov_cam * jacobian.transpose();
    // Exact symmetry keeps the conic symmetric bit for bit.
    let off_diag = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off_diag;
    cov2d[(1, 0)] = off_diag;
    cov2d[(0, 0)] += LOW_PASS;
    cov2d[(1, 1)] += LOW_PASS;
    let det = cov2d.determinant();
    let mut out = Projected {
        mean2d: offset + Vector2::new(cam.cx, cam.cy),
        offset,
        cov2d,
        conic: Matrix2::zeros(),
        depth: t.z,
        visible: false,
        radius: 0.0,
        cam_point: t,
        cov_cam,
        jacobian,
    };
    if !(det >= MIN_DETERMINANT) {
        return out;
    }
    out.visible = true;
    out.conic = Matrix2::new(cov2d[(1, 1)], -off_diag, -off_diag, cov2d[(0, 0)]) / det;
    if opacity >= WEIGHT_CUTOFF {
        let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        // weight >= cutoff  <=>  d^T conic d <= 2 ln(opacity / cutoff)
        let q_max = 2.0 * (opacity / WEIGHT_CUTOFF).ln();
        out.radius = (lambda_max * q_max).sqrt();
    }
    out
}

/// Projects every Gaussian; those behind the near plane or with a singular
/// screen covariance are flagged invisible.
pub fn project(set: &GaussianSet, cam: &Camera) -> Vec<Projected> {
    let rot = cam.rotation();
    let trans = cam.translation();
    (0..set.len())
        .map(|i| {
            project_one(
                &set.means[i],
                &set.covariances[i],
                set.opacities[i],
                cam,
                &rot,
                &trans,
            )
        })
        .collect()
}

/// Pulls gradients on the projected offset and the conic back to the world
/// mean and covariance. `d_conic` must be symmetric.
pub fn project_backward(
    p: &Projected,
    cam: &Camera,
    rot: &Matrix3<f64>,
    d_offset: &Vector2<f64>,
    d_conic: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let t = p.cam_point;
    let inv_z = 1.0 / t.z;
    let inv_z2 = inv_z * inv_z;

    let d_cov2d = -p.conic * d_conic * p.conic;
    let jw = p.jacobian * rot;
    let d_cov = jw.transpose() * d_cov2d * jw;

    let d_j = 2.0 * d_cov2d * p.jacobian * p.cov_cam;
    let mut d_t = Vector3::new(
        d_offset.x * cam.fx * inv_z,
        d_offset.y * cam.fy * inv_z,
        -(d_offset.x * cam.fx * t.x + d_offset.y * cam.fy * t.y) * inv_z2,
    );
    d_t.x += d_j[(0, 2)] * (-cam.fx * inv_z2);
    d_t.y += d_j[(1, 2)] * (-cam.fy * inv_z2);
    d_t.z += d_j[(0, 0)] * (-cam.fx * inv_z2)
        + d_j[(0, 2)] * (2.0 * cam.fx * t.x * inv_z2 * inv_z)
        + d_j[(1, 1)] * (-cam.fy * inv_z2)
        + d_j[(1, 2)] * (2.0 * cam.fy * t.y * inv_z2 * inv_z);

    (rot.transpose() * d_t, d_cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn axis_camera() -> Camera {
        Camera::new(Matrix4::identity(), 100.0, 100.0, 15.5, 15.5, 32, 32).unwrap()
    }

    fn single(mean: Vector3<f64>, cov: Matrix3<f64>) -> GaussianSet {
        GaussianSet {
            means: vec![mean],
            covariances: vec![cov],
            opacities: vec![1.0],
            colors: vec![Vector3::zeros()],
        }
    }

    #[test]
    fn on_axis_mean_hits_principal_point() {
        let cam = axis_camera();
        let p = &project(&single(Vector3::new(0.0, 0.0, 2.0), Matrix3::identity() * 1e-4), &cam)[0];
        assert!(p.visible);
        assert_eq!(p.mean2d, Vector2::new(15.5, 15.5));
        assert_eq!(p.depth, 2.0);
    }

    #[test]
    fn isotropic_on_axis_covariance() {
        let cam = axis_camera();
        let (sigma, d) = (0.01, 2.0);
        let p = &project(&single(Vector3::new(0.0, 0.0, d), Matrix3::identity() * sigma * sigma), &cam)[0];
        let expected = (100.0 * sigma / d).powi(2) + 0.3;
        assert_relative_eq!(p.cov2d, Matrix2::identity() * expected, epsilon = 1e-12);
    }

    #[test]
    fn near_plane_culls() {
        let cam = axis_camera();
        let p = &project(&single(Vector3::new(0.0, 0.0, cam.near / 2.0), Matrix3::identity()), &cam)[0];
        assert!(!p.visible);
        assert_eq!(p.radius, 0.0);
    }
}
