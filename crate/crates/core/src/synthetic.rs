//! Parametric leaves with closed-form areas, ray-cast into RGBD frames.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraIntrinsics, RgbdFrame};
use crate::dataset::{
    rasterize_polygons, save_dataset, AnnotatedInstance, Dataset, DatasetError, FrameDescriptor,
    SplitTag,
};
use crate::raster::{Bitmask, DepthRaster, RasterError};

pub const SYNTHETIC_DEPTH_SCALE: f64 = 0.001;
/// Distance of the background plane behind the leaf center, meters.
pub const BACKGROUND_OFFSET_M: f64 = 0.5;
const MAX_RAW: f32 = u16::MAX as f32;
const CM: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("leaf dimensions must be positive: {0}")]
    NonPositiveDimension(String),
    #[error("leaf does not fit inside the {width}x{height} frame at {distance_m} m")]
    OutsideFrame {
        width: u32,
        height: u32,
        distance_m: f64,
    },
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeafShape {
    /// Ellipse with semi-axes `a_cm` (local x) and `b_cm` (local y).
    PlanarEllipse { a_cm: f64, b_cm: f64 },
    /// Patch of a cylinder with axis along local y, bending away from the
    /// viewer: local point `(R sin φ, y, R(1 − cos φ))` for
    /// `|φ| ≤ arc/2`, `|y| ≤ width/2`.
    CylindricalPatch {
        radius_cm: f64,
        arc_rad: f64,
        width_cm: f64,
    },
}

impl LeafShape {
    pub fn area_cm2(&self) -> f64 {
        match *self {
            LeafShape::PlanarEllipse { a_cm, b_cm } => PI * a_cm * b_cm,
            LeafShape::CylindricalPatch {
                radius_cm,
                arc_rad,
                width_cm,
            } => radius_cm * arc_rad * width_cm,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = match *self {
            LeafShape::PlanarEllipse { a_cm, b_cm } => a_cm > 0.0 && b_cm > 0.0,
            LeafShape::CylindricalPatch {
                radius_cm,
                arc_rad,
                width_cm,
            } => radius_cm > 0.0 && arc_rad > 0.0 && arc_rad < 2.0 * PI && width_cm > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SynthError::NonPositiveDimension(format!("{self:?}")))
        }
    }

    /// Boundary curve in local coordinates (meters), `n` points, closed implicitly.
    fn outline(&self, n: usize) -> Vec<Vector3<f64>> {
        match *self {
            LeafShape::PlanarEllipse { a_cm, b_cm } => (0..n)
                .map(|i| {
                    let t = 2.0 * PI * i as f64 / n as f64;
                    Vector3::new(a_cm * CM * t.cos(), b_cm * CM * t.sin(), 0.0)
                })
                .collect(),
            LeafShape::CylindricalPatch {
                radius_cm,
                arc_rad,
                width_cm,
            } => {
                let r = radius_cm * CM;
                let hw = width_cm * CM / 2.0;
                let at = |phi: f64, y: f64| Vector3::new(r * phi.sin(), y, r * (1.0 - phi.cos()));
                let side = n / 4;
                let mut pts = Vec::with_capacity(4 * side);
                let half = arc_rad / 2.0;
                for i in 0..side {
                    pts.push(at(-half + arc_rad * i as f64 / side as f64, -hw));
                }
                for i in 0..side {
                    pts.push(at(half, -hw + 2.0 * hw * i as f64 / side as f64));
                }
                for i in 0..side {
                    pts.push(at(half - arc_rad * i as f64 / side as f64, hw));
                }
                for i in 0..side {
                    pts.push(at(-half, hw - 2.0 * hw * i as f64 / side as f64));
                }
                pts
            }
        }
    }

    /// Smallest positive ray parameter where `o + s·d` (local frame) hits the surface.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            LeafShape::PlanarEllipse { a_cm, b_cm } => {
                if d.z.abs() < 1e-15 {
                    return None;
                }
                let s = -o.z / d.z;
                let p = o + d * s;
                let (a, b) = (a_cm * CM, b_cm * CM);
                (s > 0.0 && (p.x / a).powi(2) + (p.y / b).powi(2) <= 1.0).then_some(s)
            }
            LeafShape::CylindricalPatch {
                radius_cm,
                arc_rad,
                width_cm,
            } => {
                let r = radius_cm * CM;
                // (o.x + s d.x)² + (o.z + s d.z − r)² = r²
                let oz = o.z - r;
                let qa = d.x * d.x + d.z * d.z;
                let qb = 2.0 * (o.x * d.x + oz * d.z);
                let qc = o.x * o.x + oz * oz - r * r;
                let disc = qb * qb - 4.0 * qa * qc;
                if qa == 0.0 || disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let mut roots = [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)];
                roots.sort_by(f64::total_cmp);
                roots.into_iter().find(|&s| {
                    if s <= 0.0 {
                        return false;
                    }
                    let p = o + d * s;
                    let phi = p.x.atan2(r - p.z);
                    phi.abs() <= arc_rad / 2.0 && p.y.abs() <= width_cm * CM / 2.0
                })
            }
        }
    }
}

/// Rigid placement relative to the point on the optical axis at the render
/// distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub offset: Vector3<f64>,
}

impl Pose {
    /// Rotation about the camera x axis (top edge tilting away for positive angles).
    pub fn tilt(deg: f64) -> Self {
        Self {
            rotation: Rotation3::from_axis_angle(&Vector3::x_axis(), deg.to_radians()),
            offset: Vector3::zeros(),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::tilt(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafSurface {
    pub shape: LeafShape,
    pub pose: Pose,
    pub analytic_area_cm2: f64,
}

pub fn make_leaf_surface(shape: LeafShape, pose: Pose) -> Result<LeafSurface, SynthError> {
    shape.validate()?;
    Ok(LeafSurface {
        shape,
        pose,
        analytic_area_cm2: shape.area_cm2(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Depth layering step, raw units; 0 disables quantization.
    pub quant_step: u32,
    /// Total impulse probability, split evenly between 0 and the maximum raw value.
    pub sp_prob: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            quant_step: 4,
            sp_prob: 0.002,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            quant_step: 0,
            sp_prob: 0.0,
            seed: 0,
        }
    }
}

/// Rounds to the nearest multiple of `quant_step`, then replaces each pixel
/// with 0 or 65535 with probability `sp_prob / 2` each.
pub fn corrupt_depth(depth: &DepthRaster, noise: &NoiseSpec) -> DepthRaster {
    let mut out = depth.clone();
    if noise.quant_step > 0 {
        let q = noise.quant_step as f32;
        for v in out.as_mut_slice() {
            *v = ((*v / q).round() * q).min(MAX_RAW);
        }
    }
    if noise.sp_prob > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let half = noise.sp_prob / 2.0;
        for v in out.as_mut_slice() {
            let r: f64 = rng.gen();
            if r < half {
                *v = 0.0;
            } else if r < noise.sp_prob {
                *v = MAX_RAW;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RenderedLeaf {
    pub frame: RgbdFrame,
    /// Pixels whose center ray hits the leaf.
    pub mask: Bitmask,
    pub area_cm2: f64,
    /// Projected outline in pixel-edge coordinates, suitable for annotation.
    pub polygon: Vec<[f64; 2]>,
}

const OUTLINE_POINTS: usize = 256;

/// Ray-casts pixel centers against the leaf centered at `distance_m` on the
/// optical axis and a fronto-parallel background plane
/// [`BACKGROUND_OFFSET_M`] behind it. Depth is stored in millimeter raw units.
pub fn render_rgbd(
    surface: &LeafSurface,
    intrinsics: &CameraIntrinsics,
    distance_m: f64,
    noise: &NoiseSpec,
) -> Result<RenderedLeaf, SynthError> {
    intrinsics
        .validate()
        .map_err(|e| SynthError::BadSpec(e.to_string()))?;
    if !(distance_m > 0.0) {
        return Err(SynthError::BadSpec(format!(
            "distance {distance_m} must be positive"
        )));
    }
    let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
    let outside = || SynthError::OutsideFrame {
        width: intrinsics.width,
        height: intrinsics.height,
        distance_m,
    };
    let center = surface.pose.offset + Vector3::new(0.0, 0.0, distance_m);
    let rot = surface.pose.rotation;
    let inv = rot.inverse();
    let origin_local = inv * (-center);
    let bg_z = center.z + BACKGROUND_OFFSET_M;

    let mut polygon = Vec::with_capacity(OUTLINE_POINTS);
    for p in surface.shape.outline(OUTLINE_POINTS) {
        let c = rot * p + center;
        if c.z <= 0.0 {
            return Err(outside());
        }
        let (u, v) = intrinsics.project(&c);
        // Pixel u covers [u, u+1) in annotation coordinates, centered at u + 0.5.
        let (x, y) = (u + 0.5, v + 0.5);
        if x < 1.0 || y < 1.0 || x > w as f64 - 1.0 || y > h as f64 - 1.0 {
            return Err(outside());
        }
        polygon.push([x, y]);
    }

    type Row = (Vec<f32>, Vec<bool>, Vec<[u8; 3]>);
    let rows: Vec<Row> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut depth = vec![0f32; w];
            let mut hit = vec![false; w];
            let mut color = vec![[0u8; 3]; w];
            for u in 0..w {
                let d = intrinsics.ray(u as f64, v as f64);
                let z = match surface.shape.intersect(&origin_local, &(inv * d)) {
                    Some(s) => {
                        hit[u] = true;
                        let shade = (20.0 * ((u + v) % 7) as f64 / 7.0) as u8;
                        color[u] = [40 + shade / 2, 150 + shade, 45];
                        s * d.z
                    }
                    None => {
                        let checker = ((u / 16) + (v / 16)) % 2 == 0;
                        color[u] = if checker {
                            [120, 100, 80]
                        } else {
                            [90, 80, 70]
                        };
                        bg_z
                    }
                };
                depth[u] = ((z / SYNTHETIC_DEPTH_SCALE).round() as f32).min(MAX_RAW);
            }
            (depth, hit, color)
        })
        .collect();

    let mut depth = DepthRaster::new(w, h);
    let mut mask = Bitmask::new(w, h);
    let mut color = RgbImage::new(w as u32, h as u32);
    for (v, (drow, hrow, crow)) in rows.into_iter().enumerate() {
        for u in 0..w {
            depth.set(u, v, drow[u]);
            mask.set(u, v, hrow[u]);
            color.put_pixel(u as u32, v as u32, Rgb(crow[u]));
        }
    }
    if mask.is_empty() {
        return Err(outside());
    }
    let depth = corrupt_depth(&depth, noise);
    let frame = RgbdFrame::new(color, depth, SYNTHETIC_DEPTH_SCALE, *intrinsics)
        .map_err(|e| SynthError::BadSpec(e.to_string()))?;
    Ok(RenderedLeaf {
        frame,
        mask,
        area_cm2: surface.analytic_area_cm2,
        polygon,
    })
}

/// Parameters of a generated dataset: one leaf per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    /// Leaf `i` is rendered at `distances[i % len]`.
    pub distances_m: Vec<f64>,
    pub area_range_cm2: (f64, f64),
    pub tilt_range_deg: (f64, f64),
    /// Probability that a leaf is planar rather than cylindrical.
    pub planar_fraction: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 30,
            distances_m: vec![0.5, 1.0, 1.5, 2.0, 2.5],
            area_range_cm2: (20.0, 150.0),
            tilt_range_deg: (30.0, 35.0),
            planar_fraction: 0.5,
            noise: NoiseSpec::default(),
            seed: 42,
            intrinsics: CameraIntrinsics::d415_1280x720(),
        }
    }
}

/// One generated leaf before rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafDraw {
    pub surface: LeafSurface,
    pub distance_m: f64,
    pub noise: NoiseSpec,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (a0, a1) = self.area_range_cm2;
        let (t0, t1) = self.tilt_range_deg;
        if self.n == 0 || self.distances_m.is_empty() {
            return Err(SynthError::BadSpec(
                "n and distances must be nonempty".into(),
            ));
        }
        if !(a0 > 0.0 && a0 <= a1) || !(t0 <= t1) || !(0.0..=1.0).contains(&self.planar_fraction) {
            return Err(SynthError::BadSpec(format!("{self:?}")));
        }
        if self.distances_m.iter().any(|d| !(*d > 0.0)) {
            return Err(SynthError::BadSpec("distances must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic leaf parameters for index `i`.
    pub fn draw(&self, i: usize) -> Result<LeafDraw, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64 + 1);
        let (a0, a1) = self.area_range_cm2;
        let area = if a0 == a1 { a0 } else { rng.gen_range(a0..=a1) };
        let (t0, t1) = self.tilt_range_deg;
        let tilt = if t0 == t1 { t0 } else { rng.gen_range(t0..=t1) };
        let planar = rng.gen_bool(self.planar_fraction);
        let shape = if planar {
            let aspect: f64 = rng.gen_range(0.45..0.75);
            let a = (area / (PI * aspect)).sqrt();
            LeafShape::PlanarEllipse {
                a_cm: a,
                b_cm: a * aspect,
            }
        } else {
            let radius: f64 = rng.gen_range(8.0..16.0);
            let aspect: f64 = rng.gen_range(0.8..1.4);
            // Arc length L = aspect · width and L · width = area.
            let width = (area / aspect).sqrt();
            let arc = aspect * width / radius;
            LeafShape::CylindricalPatch {
                radius_cm: radius,
                arc_rad: arc,
                width_cm: width,
            }
        };
        let flip: bool = rng.gen();
        let pose = Pose::tilt(if flip { -tilt } else { tilt });
        Ok(LeafDraw {
            surface: make_leaf_surface(shape, pose)?,
            distance_m: self.distances_m[i % self.distances_m.len()],
            noise: NoiseSpec {
                seed: self.noise.seed.wrapping_add(i as u64),
                ..self.noise
            },
        })
    }
}

/// Renders `spec.n` leaves into `out_dir` (`color/`, `depth/` and
/// `annotations.json`) and returns the dataset as it will load back.
pub fn write_synthetic_dataset(
    spec: &SynthSpec,
    out_dir: impl AsRef<Path>,
) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out.join("color"))?;
    fs::create_dir_all(out.join("depth"))?;
    let k = spec.intrinsics;
    let rendered: Vec<Result<(u64, FrameDescriptor, AnnotatedInstance), SynthError>> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let draw = spec.draw(i)?;
            let leaf = render_rgbd(&draw.surface, &k, draw.distance_m, &draw.noise)?;
            let id = i as u64 + 1;
            let file_name = format!("color/{id:05}.png");
            let depth_file_name = format!("depth/{id:05}.png");
            let color_path = out.join(&file_name);
            let depth_path = out.join(&depth_file_name);
            leaf.frame
                .color
                .save(&color_path)
                .map_err(|e| RasterError::Image {
                    path: color_path.display().to_string(),
                    source: e,
                })?;
            leaf.frame.depth.save_png(&depth_path)?;
            let polygons = vec![leaf.polygon];
            let bitmask = rasterize_polygons(&polygons, k.width as usize, k.height as usize);
            let desc = FrameDescriptor {
                id,
                file_name,
                depth_file_name,
                color_path,
                depth_path,
                width: k.width,
                height: k.height,
                depth_scale: SYNTHETIC_DEPTH_SCALE,
                intrinsics: k,
            };
            let inst = AnnotatedInstance {
                id,
                image_id: id,
                category_id: 1,
                category: "leaf".into(),
                polygons,
                bitmask,
                gt_area_cm2: leaf.area_cm2,
            };
            Ok((id, desc, inst))
        })
        .collect();
    let mut dataset = Dataset {
        split: SplitTag::Test,
        ..Default::default()
    };
    dataset.categories.insert(1, "leaf".into());
    for r in rendered {
        let (id, desc, inst) = r?;
        dataset.frames.insert(id, desc);
        dataset.instances.push(inst);
    }
    save_dataset(&dataset, out.join("annotations.json"))?;
    Ok(dataset)
}
