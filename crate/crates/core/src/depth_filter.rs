//! Depth denoising: bilateral smoothing for layered quantization noise and a
//! median filter for impulse noise.
//!
//! Both filters work in raw depth units and treat 0 as "no measurement":
//! missing pixels never contribute to a weight or a median.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::DepthRaster;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error(
        "bilateral sigmas must be positive (sigma_color={sigma_color}, sigma_space={sigma_space})"
    )]
    NonPositiveSigma { sigma_color: f64, sigma_space: f64 },
    #[error("bilateral diameter must be at least 1")]
    ZeroDiameter,
    #[error("median kernel must be odd and >= 1, got {0}")]
    BadKernel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilateralParams {
    /// Neighborhood diameter in pixels. Even values are rounded up.
    pub d: usize,
    /// Range-domain standard deviation, raw depth units.
    pub sigma_color: f64,
    /// Spatial standard deviation, pixels.
    pub sigma_space: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            d: 10,
            sigma_color: 150.0,
            sigma_space: 50.0,
        }
    }
}

impl BilateralParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.d == 0 {
            return Err(FilterError::ZeroDiameter);
        }
        if !(self.sigma_color > 0.0 && self.sigma_space > 0.0) {
            return Err(FilterError::NonPositiveSigma {
                sigma_color: self.sigma_color,
                sigma_space: self.sigma_space,
            });
        }
        Ok(())
    }

    /// Odd diameter actually used for the centered window.
    pub fn effective_diameter(&self) -> usize {
        if self.d.is_multiple_of(2) {
            self.d + 1
        } else {
            self.d
        }
    }

    pub fn radius(&self) -> usize {
        (self.effective_diameter() - 1) / 2
    }
}

/// Edge-preserving bilateral filter over a disk of the effective diameter.
///
/// Each valid output pixel is the normalized sum over valid neighbors with
/// `dx² + dy² <= r²`, weighted by a spatial Gaussian times a range Gaussian
/// on the raw depth difference. Missing pixels stay 0.
pub fn bilateral_filter(
    depth: &DepthRaster,
    params: &BilateralParams,
) -> Result<DepthRaster, FilterError> {
    params.validate()?;
    let (w, h) = (depth.width(), depth.height());
    let r = params.radius() as isize;
    let space_coef = -0.5 / (params.sigma_space * params.sigma_space);
    let color_coef = -0.5 / (params.sigma_color * params.sigma_color);

    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dx, dy, (((dx * dx + dy * dy) as f64) * space_coef).exp()));
            }
        }
    }

    let mut out = DepthRaster::new(w, h);
    out.as_mut_slice()
        .par_chunks_mut(w.max(1))
        .enumerate()
        .for_each(|(y, row)| {
            for (x, slot) in row.iter_mut().enumerate() {
                let center = depth.get(x, y) as f64;
                if center == 0.0 {
                    continue;
                }
                let mut num = 0.0;
                let mut den = 0.0;
                for &(dx, dy, ws) in &offsets {
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let v = depth.get(nx as usize, ny as usize) as f64;
                    if v == 0.0 {
                        continue;
                    }
                    let diff = v - center;
                    let wgt = ws * (diff * diff * color_coef).exp();
                    num += wgt * v;
                    den += wgt;
                }
                // den >= 1 because the center pixel always contributes weight 1.
                *slot = (num / den) as f32;
            }
        });
    Ok(out)
}

/// Median over valid pixels of a `kernel × kernel` window clipped at the
/// borders. An even count of valid values takes the lower median; a window
/// with no valid values yields 0.
pub fn median_filter(depth: &DepthRaster, kernel: usize) -> Result<DepthRaster, FilterError> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(FilterError::BadKernel(kernel));
    }
    let (w, h) = (depth.width(), depth.height());
    let r = kernel / 2;
    let mut out = DepthRaster::new(w, h);
    out.as_mut_slice()
        .par_chunks_mut(w.max(1))
        .enumerate()
        .for_each(|(y, row)| {
            let mut window = Vec::with_capacity(kernel * kernel);
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            for (x, slot) in row.iter_mut().enumerate() {
                window.clear();
                let x0 = x.saturating_sub(r);
                let x1 = (x + r).min(w - 1);
                for yy in y0..=y1 {
                    window.extend(depth.row(yy)[x0..=x1].iter().copied().filter(|&v| v != 0.0));
                }
                if window.is_empty() {
                    continue;
                }
                let mid = (window.len() - 1) / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                *slot = *m;
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct per-pixel weighted average, written independently of the
    /// offset table used above.
    fn bilateral_oracle(
        depth: &DepthRaster,
        d: usize,
        sc: f64,
        ss: f64,
        x: usize,
        y: usize,
    ) -> f64 {
        let d = if d.is_multiple_of(2) { d + 1 } else { d };
        let r = ((d - 1) / 2) as i64;
        let c = depth.get(x, y) as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for yy in 0..depth.height() as i64 {
            for xx in 0..depth.width() as i64 {
                let (dx, dy) = (xx - x as i64, yy - y as i64);
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let v = depth.get(xx as usize, yy as usize) as f64;
                if v == 0.0 {
                    continue;
                }
                let sp = (-((dx * dx + dy * dy) as f64) / (2.0 * ss * ss)).exp();
                let rg = (-((v - c) * (v - c)) / (2.0 * sc * sc)).exp();
                num += sp * rg * v;
                den += sp * rg;
            }
        }
        num / den
    }

    #[test]
    fn documented_defaults() {
        let p = BilateralParams::default();
        assert_eq!((p.d, p.sigma_color, p.sigma_space), (10, 150.0, 50.0));
        assert_eq!(p.effective_diameter(), 11);
    }

    #[test]
    fn bilateral_constant_is_unchanged() {
        let d = DepthRaster::filled(9, 7, 1000.0);
        let out = bilateral_filter(&d, &BilateralParams::default()).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 1000.0).abs() < 1e-3));
    }

    #[test]
    fn bilateral_d1_is_identity() {
        let d = DepthRaster::from_fn(6, 5, |x, y| ((x * 37 + y * 11) % 17) as f32 * 3.0);
        let p = BilateralParams {
            d: 1,
            sigma_color: 150.0,
            sigma_space: 50.0,
        };
        assert_eq!(bilateral_filter(&d, &p).unwrap(), d);
    }

    #[test]
    fn bilateral_step_edge_matches_oracle() {
        let d = DepthRaster::from_fn(5, 5, |x, _| if x < 2 { 1000.0 } else { 1002.0 });
        let p = BilateralParams {
            d: 5,
            sigma_color: 150.0,
            sigma_space: 50.0,
        };
        let out = bilateral_filter(&d, &p).unwrap();
        for y in 0..5 {
            let want = bilateral_oracle(&d, 5, 150.0, 50.0, 2, y);
            assert!((out.get(2, y) as f64 - want).abs() < 1e-3, "row {y}");
        }
        // Radius-2 disk holds 13 pixels: 4 at 1000, 9 at 1002.
        assert!((out.get(2, 2) as f64 - 1001.38467).abs() < 1e-3);
    }

    #[test]
    fn bilateral_holes_stay_holes_and_carry_no_weight() {
        let mut d = DepthRaster::filled(5, 5, 800.0);
        d.set(2, 2, 0.0);
        d.set(1, 2, 0.0);
        let out = bilateral_filter(&d, &BilateralParams::default()).unwrap();
        assert_eq!(out.get(2, 2), 0.0);
        assert_eq!(out.get(1, 2), 0.0);
        assert!((out.get(3, 2) - 800.0).abs() < 1e-3);
    }

    #[test]
    fn bilateral_rejects_bad_sigmas() {
        let d = DepthRaster::new(2, 2);
        let p = BilateralParams {
            d: 3,
            sigma_color: 0.0,
            sigma_space: 1.0,
        };
        assert!(matches!(
            bilateral_filter(&d, &p),
            Err(FilterError::NonPositiveSigma { .. })
        ));
    }

    #[test]
    fn median_examples() {
        let d = DepthRaster::filled(7, 7, 500.0);
        assert_eq!(median_filter(&d, 5).unwrap(), d);

        let mut imp = DepthRaster::filled(7, 7, 500.0);
        imp.set(3, 3, 0.0);
        assert_eq!(median_filter(&imp, 5).unwrap(), d);

        let row = DepthRaster::from_vec(7, 1, vec![1.0, 2.0, 3.0, 9.0, 5.0, 6.0, 7.0]).unwrap();
        let out = median_filter(&row, 5).unwrap();
        assert_eq!(out.get(3, 0), 5.0);
    }

    #[test]
    fn median_kernel_one_is_identity_and_even_is_rejected() {
        let d = DepthRaster::from_fn(5, 4, |x, y| (x * 3 + y) as f32);
        assert_eq!(median_filter(&d, 1).unwrap(), d);
        assert_eq!(median_filter(&d, 4), Err(FilterError::BadKernel(4)));
        assert_eq!(median_filter(&d, 0), Err(FilterError::BadKernel(0)));
    }

    #[test]
    fn median_all_invalid_window_is_zero() {
        let d = DepthRaster::new(4, 4);
        assert!(median_filter(&d, 3)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }
}
