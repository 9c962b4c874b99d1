//! Single-channel rasters: raw depth maps and boolean masks.

use std::path::Path;

use image::{ImageBuffer, Luma};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster buffer has {got} values, expected {width}x{height}")]
    BadLength {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("depth PNG {path} must be 16-bit single channel, found {found}")]
    NotDepth16 { path: String, found: String },
    #[error("image error for {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Depth map in raw sensor units (multiply by the frame's depth scale for
/// meters). A value of 0 marks a pixel without a measurement.
///
/// Values are held as `f32` so filter output keeps sub-unit precision; the
/// 16-bit PNG round trip rounds to the nearest raw unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRaster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthRaster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::BadLength {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_u16(width: usize, height: usize, raw: &[u16]) -> Result<Self, RasterError> {
        Self::from_vec(width, height, raw.iter().map(|&v| v as f32).collect())
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Rounds to the nearest raw unit, saturating at the 16-bit range.
    pub fn to_u16(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|&v| v.round().clamp(0.0, u16::MAX as f32) as u16)
            .collect()
    }

    /// Copy with every pixel outside `mask` set to 0.
    pub fn masked(&self, mask: &Bitmask) -> Self {
        assert_eq!((self.width, self.height), (mask.width(), mask.height()));
        let data = self
            .data
            .iter()
            .zip(mask.as_slice())
            .map(|(&d, &m)| if m { d } else { 0.0 })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| RasterError::Image {
            path: path.display().to_string(),
            source,
        })?;
        match img {
            image::DynamicImage::ImageLuma16(buf) => {
                let (w, h) = buf.dimensions();
                Self::from_u16(w as usize, h as usize, buf.as_raw())
            }
            other => Err(RasterError::NotDepth16 {
                path: path.display().to_string(),
                found: format!("{:?}", other.color()),
            }),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        let path = path.as_ref();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_u16())
                .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| RasterError::Image {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Boolean H×W raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Bitmask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::BadLength {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn intersection_count(&self, other: &Bitmask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// Iterator over `(x, y)` of set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| RasterError::Image {
                path: path.display().to_string(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.as_raw().iter().map(|&v| v > 0).collect(),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        let path = path.as_ref();
        let raw: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| RasterError::Image {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_png_round_trip_rounds_to_raw_units() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let d =
            DepthRaster::from_vec(3, 2, vec![0.0, 1000.4, 1000.6, 65535.0, 70000.0, 2.0]).unwrap();
        d.save_png(&path).unwrap();
        let back = DepthRaster::load_png(&path).unwrap();
        assert_eq!(
            back.as_slice(),
            &[0.0, 1000.0, 1001.0, 65535.0, 65535.0, 2.0]
        );
    }

    #[test]
    fn eight_bit_png_is_rejected_as_depth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        Bitmask::new(4, 4).save_png(&path).unwrap();
        assert!(matches!(
            DepthRaster::load_png(&path),
            Err(RasterError::NotDepth16 { .. })
        ));
    }

    #[test]
    fn mask_helpers() {
        let m = Bitmask::from_fn(4, 3, |x, y| x == y);
        assert_eq!(m.count(), 3);
        assert_eq!(
            m.iter_set().collect::<Vec<_>>(),
            vec![(0, 0), (1, 1), (2, 2)]
        );
        let full = Bitmask::from_fn(4, 3, |_, _| true);
        assert_eq!(m.intersection_count(&full), 3);
        assert!(Bitmask::new(2, 2).is_empty());
    }
}
