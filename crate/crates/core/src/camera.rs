//! Pinhole intrinsics and registered RGBD frames.

use image::RgbImage;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::DepthRaster;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    NonPositiveFocal { fx: f64, fy: f64 },
    #[error("principal point ({cx}, {cy}) outside {width}x{height} image")]
    PrincipalPointOutside {
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    },
    #[error("depth scale must be positive, got {0}")]
    BadDepthScale(f64),
    #[error("color is {color_w}x{color_h} but depth is {depth_w}x{depth_h}")]
    DimensionMismatch {
        color_w: usize,
        color_h: usize,
        depth_w: usize,
        depth_h: usize,
    },
    #[error("intrinsics describe {int_w}x{int_h} but rasters are {w}x{h}")]
    IntrinsicsMismatch {
        int_w: u32,
        int_h: u32,
        w: usize,
        h: usize,
    },
}

/// Pinhole intrinsics in pixels. Pixel index `(u, v)` is the center of the
/// pixel, so the principal ray passes through `(cx, cy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// RealSense D415 depth stream at 1280×720.
    pub fn d415_1280x720() -> Self {
        Self {
            fx: 920.0,
            fy: 920.0,
            cx: 640.0,
            cy: 360.0,
            width: 1280,
            height: 720,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::NonPositiveFocal {
                fx: self.fx,
                fy: self.fy,
            });
        }
        let inside = |c: f64, n: u32| c >= 0.0 && c < n as f64;
        if !inside(self.cx, self.width) || !inside(self.cy, self.height) {
            return Err(CameraError::PrincipalPointOutside {
                cx: self.cx,
                cy: self.cy,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Camera-frame point for pixel `(u, v)` at metric depth `z`.
    #[inline]
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Pixel coordinates of a camera-frame point with `z > 0`.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Unit-depth ray direction through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Color and depth rasters registered to the same pixel grid.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub color: RgbImage,
    pub depth: DepthRaster,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
    pub intrinsics: CameraIntrinsics,
}

impl RgbdFrame {
    pub fn new(
        color: RgbImage,
        depth: DepthRaster,
        depth_scale: f64,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, CameraError> {
        let (cw, ch) = (color.width() as usize, color.height() as usize);
        if (cw, ch) != (depth.width(), depth.height()) {
            return Err(CameraError::DimensionMismatch {
                color_w: cw,
                color_h: ch,
                depth_w: depth.width(),
                depth_h: depth.height(),
            });
        }
        if !(depth_scale > 0.0) {
            return Err(CameraError::BadDepthScale(depth_scale));
        }
        intrinsics.validate()?;
        if (intrinsics.width as usize, intrinsics.height as usize) != (cw, ch) {
            return Err(CameraError::IntrinsicsMismatch {
                int_w: intrinsics.width,
                int_h: intrinsics.height,
                w: cw,
                h: ch,
            });
        }
        Ok(Self {
            color,
            depth,
            depth_scale,
            intrinsics,
        })
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }
}
