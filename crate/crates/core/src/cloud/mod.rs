//! Point clouds of a segmented leaf: back-projection from masked depth,
//! DBSCAN outlier removal and camera-facing normals.

mod dbscan;
mod normals;
mod ply;

pub use dbscan::{cluster_filter, dbscan_labels, DbscanParams};
pub use normals::{estimate_oriented_normals, DEFAULT_NORMAL_NEIGHBORS};
pub use ply::write_ply;

use image::RgbImage;
use nalgebra::Vector3;
use thiserror::Error;

use crate::camera::{CameraIntrinsics, RgbdFrame};
use crate::raster::{Bitmask, DepthRaster};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("mask is {mask_w}x{mask_h} but frame is {frame_w}x{frame_h}")]
    MaskMismatch {
        mask_w: usize,
        mask_h: usize,
        frame_w: usize,
        frame_h: usize,
    },
    #[error("no valid masked pixels")]
    NoValidPixels,
    #[error("empty point cloud")]
    Empty,
    #[error("no cluster: every point was classified as noise")]
    NoCluster,
    #[error("invalid DBSCAN parameters (eps={eps}, min_pts={min_pts})")]
    BadDbscanParams { eps: f64, min_pts: usize },
    #[error("normal estimation needs at least {needed} points and k >= 3, got {got} points")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("degenerate neighborhood around point {0}: all neighbors coincide")]
    DegenerateNeighborhood(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Points in the camera frame (meters, +z forward) with optional parallel
/// attributes. `pixels` records the source pixel of back-projected points so
/// grid-based meshing can recover image adjacency.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub pixels: Option<Vec<(u32, u32)>>,
    /// Intrinsics of the camera the points were back-projected with.
    pub camera: Option<CameraIntrinsics>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// New cloud holding the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            pixels: self
                .pixels
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i]).collect()),
            camera: self.camera,
        }
    }

    /// Median of the z coordinates, meters.
    pub fn median_depth(&self) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut z: Vec<f64> = self.points.iter().map(|p| p.z).collect();
        let mid = z.len() / 2;
        z.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
        let upper = z[mid];
        if z.len() % 2 == 1 {
            Some(upper)
        } else {
            let lower = z[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some(0.5 * (lower + upper))
        }
    }
}

/// One point per masked pixel with nonzero raw depth:
/// `z = raw · depth_scale`, `x = (u − cx)·z/fx`, `y = (v − cy)·z/fy`.
pub fn backproject_masked(frame: &RgbdFrame, mask: &Bitmask) -> Result<PointCloud, CloudError> {
    backproject_raster(
        &frame.depth,
        Some(&frame.color),
        frame.depth_scale,
        &frame.intrinsics,
        mask,
    )
}

/// Back-projection from loose parts, for callers holding a filtered depth
/// raster alongside the original frame.
pub fn backproject_raster(
    depth: &DepthRaster,
    color: Option<&RgbImage>,
    depth_scale: f64,
    intrinsics: &CameraIntrinsics,
    mask: &Bitmask,
) -> Result<PointCloud, CloudError> {
    if (mask.width(), mask.height()) != (depth.width(), depth.height()) {
        return Err(CloudError::MaskMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            frame_w: depth.width(),
            frame_h: depth.height(),
        });
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut pixels = Vec::new();
    for (u, v) in mask.iter_set() {
        let raw = depth.get(u, v);
        if raw <= 0.0 {
            continue;
        }
        let z = raw as f64 * depth_scale;
        points.push(intrinsics.backproject(u as f64, v as f64, z));
        if let Some(c) = color {
            colors.push(c.get_pixel(u as u32, v as u32).0);
        }
        pixels.push((u as u32, v as u32));
    }
    if points.is_empty() {
        return Err(CloudError::NoValidPixels);
    }
    Ok(PointCloud {
        points,
        normals: None,
        colors: color.map(|_| colors),
        pixels: Some(pixels),
        camera: Some(*intrinsics),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: u32, h: u32, raw: f32) -> RgbdFrame {
        let k = CameraIntrinsics::new(100.0, 100.0, 4.0, 3.0, w, h).unwrap();
        RgbdFrame::new(
            RgbImage::from_pixel(w, h, image::Rgb([10, 200, 30])),
            DepthRaster::filled(w as usize, h as usize, raw),
            0.001,
            k,
        )
        .unwrap()
    }

    #[test]
    fn principal_ray_and_similar_triangles() {
        let f = frame(8, 6, 1000.0);
        let mut m = Bitmask::new(8, 6);
        m.set(4, 3, true);
        let c = backproject_masked(&f, &m).unwrap();
        assert!((c.points[0] - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(c.colors.as_ref().unwrap()[0], [10, 200, 30]);

        // Pixel (cx + fx, cy) with fx = 4 so it stays inside a 9-wide image.
        let k = CameraIntrinsics::new(4.0, 4.0, 4.0, 3.0, 9, 6).unwrap();
        let d = DepthRaster::filled(9, 6, 1000.0);
        let mut m = Bitmask::new(9, 6);
        m.set(8, 3, true);
        let c = backproject_raster(&d, None, 0.001, &k, &m).unwrap();
        assert!((c.points[0] - Vector3::new(1.0, 0.0, 1.0)).norm() < 1e-12);
        assert!(c.colors.is_none());
    }

    #[test]
    fn zero_depth_pixels_are_dropped() {
        let mut f = frame(8, 6, 1000.0);
        f.depth.set(1, 1, 0.0);
        f.depth.set(2, 1, 0.0);
        let m = Bitmask::from_fn(8, 6, |x, y| y == 1 && x < 5);
        let c = backproject_masked(&f, &m).unwrap();
        assert_eq!(c.len(), 5 - 2);
        assert_eq!(c.pixels.as_ref().unwrap()[0], (0, 1));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let f = frame(8, 6, 1000.0);
        assert!(matches!(
            backproject_masked(&f, &Bitmask::new(8, 6)),
            Err(CloudError::NoValidPixels)
        ));
        assert!(matches!(
            backproject_masked(&f, &Bitmask::new(7, 6)),
            Err(CloudError::MaskMismatch { .. })
        ));
    }

    #[test]
    fn backprojected_points_reproject_to_pixel_centers() {
        let k = CameraIntrinsics::d415_1280x720();
        let d = DepthRaster::from_fn(1280, 720, |x, y| 500.0 + ((x * 7 + y * 3) % 2000) as f32);
        let m = Bitmask::from_fn(1280, 720, |x, y| (x + y) % 97 == 0);
        let c = backproject_raster(&d, None, 0.001, &k, &m).unwrap();
        for (p, &(u, v)) in c.points.iter().zip(c.pixels.as_ref().unwrap()) {
            let (pu, pv) = k.project(p);
            assert!((pu - u as f64).abs() < 0.5 && (pv - v as f64).abs() < 0.5);
        }
    }

    #[test]
    fn median_depth_even_and_odd() {
        let c = PointCloud::from_points(vec![
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 2.0),
        ]);
        assert_eq!(c.median_depth(), Some(2.0));
        let c = PointCloud::from_points(vec![
            Vector3::new(0.0, 0.0, 4.0),
            Vector3::new(0.0, 0.0, 1.0),
        ]);
        assert_eq!(c.median_depth(), Some(2.5));
    }
}
