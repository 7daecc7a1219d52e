//! Pinhole projection and inverse-depth back-projection.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

/// Points closer than this along the optical axis do not project.
pub const MIN_DEPTH: f64 = 1e-4;
/// Projections must land at least this far inside the image.
pub const BOUNDS_MARGIN: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera or outside the image")]
    OutOfView,
    #[error("inverse depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// 640x480 camera with a ~65 degree horizontal field of view.
    pub fn vga() -> Self {
        Self::new(500.0, 500.0, 319.5, 239.5, 640, 480).expect("valid VGA intrinsics")
    }

    pub fn in_bounds(&self, pixel: &Vector2<f64>, margin: f64) -> bool {
        pixel.x >= margin
            && pixel.y >= margin
            && pixel.x <= self.width as f64 - 1.0 - margin
            && pixel.y <= self.height as f64 - 1.0 - margin
    }

    /// Projection without any visibility test.
    pub fn project_unchecked(&self, x: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if !(x.z > MIN_DEPTH) {
            return Err(CameraError::OutOfView);
        }
        let p = self.project_unchecked(x);
        if self.in_bounds(&p, BOUNDS_MARGIN) {
            Ok(p)
        } else {
            Err(CameraError::OutOfView)
        }
    }

    /// d(project)/dx at a camera-frame point.
    pub fn projection_jacobian(&self, x: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz2,
        )
    }

    /// Ray through `pixel` with unit z component.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn bearing(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        self.ray(pixel).normalize()
    }

    pub fn backproject(&self, p: &InverseDepthPoint) -> Result<Vector3<f64>, CameraError> {
        if !(p.inv_depth > 0.0) {
            return Err(CameraError::NonPositiveDepth(p.inv_depth));
        }
        Ok(self.ray(&p.pixel) / p.inv_depth)
    }
}

/// Pixel location with inverse depth along its ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseDepthPoint {
    pub pixel: Vector2<f64>,
    pub inv_depth: f64,
}

impl InverseDepthPoint {
    pub fn new(u: f64, v: f64, inv_depth: f64) -> Self {
        Self {
            pixel: Vector2::new(u, v),
            inv_depth,
        }
    }
}
