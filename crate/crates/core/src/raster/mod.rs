//! Tile-based splatting of a [`GaussianSet`](crate::gaussian::GaussianSet)
//! and its analytic adjoint.
//!
//! Cameras follow the OpenCV convention (x right, y down, z forward) and pixel
//! `(i, j)` is centred at coordinates `(i, j)`.

mod project;
mod render;

pub use project::{project, project_backward, Projected};
pub use render::{render, render_backward, render_with_stats, RenderStats};

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::image::Image;

pub const TILE_SIZE: usize = 16;
/// Screen-space low-pass added to every projected covariance, in pixels².
pub const LOW_PASS: f64 = 0.3;
pub const WEIGHT_CUTOFF: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const MIN_DETERMINANT: f64 = 1e-12;
pub const DEFAULT_NEAR: f64 = 0.05;

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub world_to_camera: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    pub fn new(
        world_to_camera: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            world_to_camera,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near: DEFAULT_NEAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target` with world +y as up. The principal
    /// point is the image centre.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let up = Vector3::y();
        let down = -(up - forward * up.dot(&forward));
        if down.norm() < 1e-9 {
            return Err(Error::invalid("look-at direction is parallel to the up axis"));
        }
        let down = down.normalize();
        let right = down.cross(&forward);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rot * eye));
        Self::new(
            m,
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into()
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation().transpose() * self.translation()
    }

    pub fn validate(&self) -> Result<()> {
        if self.world_to_camera.iter().any(|x| !x.is_finite())
            || ![self.fx, self.fy, self.cx, self.cy, self.near]
                .iter()
                .all(|x| x.is_finite())
        {
            return Err(Error::NonFinite("camera".into()));
        }
        crate::rotation::check_rotation(&self.rotation(), 1e-5)
            .map_err(|r| Error::invalid(format!("camera rotation: {r}")))?;
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::invalid("camera transform must be rigid (last row 0 0 0 1)"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.near > 0.0) {
            return Err(Error::invalid("near plane must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera has an empty image"));
        }
        Ok(())
    }
}

/// Rendered colour and opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub rgb: Image,
    pub alpha: Image,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            rgb: Image::new(width, height, 3),
            alpha: Image::new(width, height, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn quantized(&self) -> ImageBuffer {
        ImageBuffer {
            rgb: self.rgb.quantized(),
            alpha: self.alpha.quantized(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn look_at_points_the_optical_axis_at_the_target() {
        let cam = Camera::look_at(
            Vector3::new(2.0, 1.0, 3.0),
            Vector3::new(0.0, 0.5, 0.0),
            50.0,
            32,
            32,
        )
        .unwrap();
        let t = cam.rotation() * Vector3::new(0.0, 0.5, 0.0) + cam.translation();
        assert_relative_eq!(t.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(t.y, 0.0, epsilon = 1e-12);
        assert!(t.z > 0.0);
        assert_relative_eq!(cam.center(), Vector3::new(2.0, 1.0, 3.0), epsilon = 1e-12);
        // World up projects upwards in the image (negative camera y).
        let up = cam.rotation() * Vector3::y();
        assert!(up.y < 0.0);
    }

    #[test]
    fn rejects_invalid_cameras() {
        let mut m = Matrix4::identity();
        assert!(Camera::new(m, 0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        m[(0, 0)] = 2.0;
        assert!(Camera::new(m, 1.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        let mut cam = Camera::new(Matrix4::identity(), 1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        cam.near = 0.0;
        assert!(cam.validate().is_err());
    }
}
