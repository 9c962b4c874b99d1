//! COCO-style RGBD datasets: annotation JSON, polygon rasterization, k-fold
//! splits by image, and the per-instance results CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraError, CameraIntrinsics, RgbdFrame};
use crate::raster::{Bitmask, DepthRaster, RasterError};

/// Placeholder for an unknown ground-truth area.
pub const UNKNOWN_AREA: f64 = -1.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation JSON {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("image {image_id}: {field} is required")]
    MissingField { image_id: u64, field: &'static str },
    #[error("image {image_id}: depth_scale must be > 0, got {value}")]
    BadDepthScale { image_id: u64, value: f64 },
    #[error("image {image_id}: file {path} not found")]
    MissingImage { image_id: u64, path: String },
    #[error("image {image_id}: color is {color_w}x{color_h}, depth is {depth_w}x{depth_h}, declared {w}x{h}")]
    DimensionMismatch {
        image_id: u64,
        color_w: u32,
        color_h: u32,
        depth_w: u32,
        depth_h: u32,
        w: u32,
        h: u32,
    },
    #[error("annotation {annotation_id}: degenerate polygon with {vertices} vertices")]
    DegeneratePolygon { annotation_id: u64, vertices: usize },
    #[error("annotation {annotation_id}: polygon covers no pixel centers")]
    EmptyMask { annotation_id: u64 },
    #[error("annotation {annotation_id}: leaf_area_cm2 must be >= 0 or exactly -1, got {value}")]
    BadArea { annotation_id: u64, value: f64 },
    #[error("annotation {annotation_id} references unknown image {image_id}")]
    UnknownImage { annotation_id: u64, image_id: u64 },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("cannot split {images} images into {k} folds (need 2 <= k <= images)")]
    BadFoldCount { k: usize, images: usize },
    #[error("image {image_id}: {source}")]
    Camera {
        image_id: u64,
        #[source]
        source: CameraError,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("results CSV {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Val,
    Test,
}

/// Image entry of a dataset; rasters are loaded on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDescriptor {
    pub id: u64,
    /// Color file name as written in the annotation file.
    pub file_name: String,
    pub depth_file_name: String,
    pub color_path: PathBuf,
    pub depth_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub depth_scale: f64,
    pub intrinsics: CameraIntrinsics,
}

impl FrameDescriptor {
    pub fn load(&self) -> Result<RgbdFrame, DatasetError> {
        let color = image::open(&self.color_path)
            .map_err(|e| RasterError::Image {
                path: self.color_path.display().to_string(),
                source: e,
            })?
            .to_rgb8();
        let depth = DepthRaster::load_png(&self.depth_path)?;
        RgbdFrame::new(color, depth, self.depth_scale, self.intrinsics).map_err(|source| {
            DatasetError::Camera {
                image_id: self.id,
                source,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInstance {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub category: String,
    /// One or more closed rings in pixel coordinates, where pixel `(u, v)`
    /// covers `[u, u+1) × [v, v+1)`.
    pub polygons: Vec<Vec<[f64; 2]>>,
    pub bitmask: Bitmask,
    /// Ground-truth area in cm², or [`UNKNOWN_AREA`].
    pub gt_area_cm2: f64,
}

impl AnnotatedInstance {
    pub fn has_gt_area(&self) -> bool {
        self.gt_area_cm2 >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub frames: BTreeMap<u64, FrameDescriptor>,
    pub instances: Vec<AnnotatedInstance>,
    pub categories: BTreeMap<u64, String>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn image_ids(&self) -> Vec<u64> {
        self.frames.keys().copied().collect()
    }

    pub fn frame(&self, image_id: u64) -> Option<&FrameDescriptor> {
        self.frames.get(&image_id)
    }

    /// Sub-dataset with the given images and all of their instances.
    pub fn subset(&self, image_ids: &BTreeSet<u64>) -> Dataset {
        Dataset {
            frames: self
                .frames
                .iter()
                .filter(|(id, _)| image_ids.contains(id))
                .map(|(id, f)| (*id, f.clone()))
                .collect(),
            instances: self
                .instances
                .iter()
                .filter(|i| image_ids.contains(&i.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
            split: self.split,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawImage {
    id: u64,
    file_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_file_name: Option<String>,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<RawIntrinsics>,
}

fn default_category() -> u64 {
    1
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    #[serde(default = "default_category")]
    category_id: u64,
    segmentation: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    leaf_area_cm2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDataset {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitTag>,
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    #[serde(default)]
    categories: Vec<RawCategory>,
}

/// Even-odd fill of the rings, sampling each pixel at its center
/// `(u + 0.5, v + 0.5)`.
pub fn rasterize_polygons(polygons: &[Vec<[f64; 2]>], width: usize, height: usize) -> Bitmask {
    let mut mask = Bitmask::new(width, height);
    let mut xs = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for ring in polygons {
            let n = ring.len();
            for i in 0..n {
                let [x1, y1] = ring[i];
                let [x2, y2] = ring[(i + 1) % n];
                if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                    xs.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // Pixel u is inside when pair[0] <= u + 0.5 < pair[1].
            let lo = (pair[0] - 0.5).ceil().max(0.0);
            let hi = (pair[1] - 0.5).ceil().min(width as f64);
            let mut u = lo;
            while u < hi {
                mask.set(u as usize, y, true);
                u += 1.0;
            }
        }
    }
    mask
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads an annotation file. Image headers are checked for existence and
/// dimensions; pixel data is read later through [`FrameDescriptor::load`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: RawDataset = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut frames = BTreeMap::new();
    for img in raw.images {
        let id = img.id;
        let depth_file_name = img.depth_file_name.ok_or(DatasetError::MissingField {
            image_id: id,
            field: "depth_file_name",
        })?;
        let depth_scale = img.depth_scale.ok_or(DatasetError::MissingField {
            image_id: id,
            field: "depth_scale",
        })?;
        if !(depth_scale > 0.0) {
            return Err(DatasetError::BadDepthScale {
                image_id: id,
                value: depth_scale,
            });
        }
        let k = img.intrinsics.ok_or(DatasetError::MissingField {
            image_id: id,
            field: "intrinsics",
        })?;
        let intrinsics = CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, img.width, img.height)
            .map_err(|source| DatasetError::Camera {
                image_id: id,
                source,
            })?;
        let color_path = root.join(&img.file_name);
        let depth_path = root.join(&depth_file_name);
        let dims = |p: &Path| {
            if !p.is_file() {
                return Err(DatasetError::MissingImage {
                    image_id: id,
                    path: p.display().to_string(),
                });
            }
            image::image_dimensions(p).map_err(|e| {
                DatasetError::Raster(RasterError::Image {
                    path: p.display().to_string(),
                    source: e,
                })
            })
        };
        let (cw, ch) = dims(&color_path)?;
        let (dw, dh) = dims(&depth_path)?;
        if (cw, ch) != (dw, dh) || (cw, ch) != (img.width, img.height) {
            return Err(DatasetError::DimensionMismatch {
                image_id: id,
                color_w: cw,
                color_h: ch,
                depth_w: dw,
                depth_h: dh,
                w: img.width,
                h: img.height,
            });
        }
        let desc = FrameDescriptor {
            id,
            file_name: img.file_name,
            depth_file_name,
            color_path,
            depth_path,
            width: img.width,
            height: img.height,
            depth_scale,
            intrinsics,
        };
        if frames.insert(id, desc).is_some() {
            return Err(DatasetError::DuplicateId { kind: "image", id });
        }
    }

    let categories: BTreeMap<u64, String> =
        raw.categories.into_iter().map(|c| (c.id, c.name)).collect();
    let mut seen = BTreeSet::new();
    let mut instances = Vec::with_capacity(raw.annotations.len());
    for ann in raw.annotations {
        if !seen.insert(ann.id) {
            return Err(DatasetError::DuplicateId {
                kind: "annotation",
                id: ann.id,
            });
        }
        let frame = frames
            .get(&ann.image_id)
            .ok_or(DatasetError::UnknownImage {
                annotation_id: ann.id,
                image_id: ann.image_id,
            })?;
        let mut polygons = Vec::with_capacity(ann.segmentation.len());
        for flat in &ann.segmentation {
            if flat.len() % 2 != 0 || flat.len() < 6 {
                return Err(DatasetError::DegeneratePolygon {
                    annotation_id: ann.id,
                    vertices: flat.len() / 2,
                });
            }
            polygons.push(
                flat.chunks_exact(2)
                    .map(|c| [c[0], c[1]])
                    .collect::<Vec<_>>(),
            );
        }
        if polygons.is_empty() {
            return Err(DatasetError::DegeneratePolygon {
                annotation_id: ann.id,
                vertices: 0,
            });
        }
        let gt_area_cm2 = ann.leaf_area_cm2.unwrap_or(UNKNOWN_AREA);
        if !(gt_area_cm2 >= 0.0 || gt_area_cm2 == UNKNOWN_AREA) {
            return Err(DatasetError::BadArea {
                annotation_id: ann.id,
                value: gt_area_cm2,
            });
        }
        let bitmask = rasterize_polygons(&polygons, frame.width as usize, frame.height as usize);
        if bitmask.is_empty() {
            return Err(DatasetError::EmptyMask {
                annotation_id: ann.id,
            });
        }
        instances.push(AnnotatedInstance {
            id: ann.id,
            image_id: ann.image_id,
            category_id: ann.category_id,
            category: categories
                .get(&ann.category_id)
                .cloned()
                .unwrap_or_else(|| "leaf".to_string()),
            polygons,
            bitmask,
            gt_area_cm2,
        });
    }
    Ok(Dataset {
        frames,
        instances,
        categories,
        split: raw.split.unwrap_or_default(),
    })
}

/// Writes the annotation JSON. Image files are not touched; their names are
/// written as stored in the descriptors.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let images = dataset
        .frames
        .values()
        .map(|f| RawImage {
            id: f.id,
            file_name: f.file_name.clone(),
            depth_file_name: Some(f.depth_file_name.clone()),
            width: f.width,
            height: f.height,
            depth_scale: Some(f.depth_scale),
            intrinsics: Some(RawIntrinsics {
                fx: f.intrinsics.fx,
                fy: f.intrinsics.fy,
                cx: f.intrinsics.cx,
                cy: f.intrinsics.cy,
            }),
        })
        .collect();
    let annotations = dataset
        .instances
        .iter()
        .map(|i| {
            let pts = i.polygons.iter().flatten();
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for p in pts {
                x0 = x0.min(p[0]);
                y0 = y0.min(p[1]);
                x1 = x1.max(p[0]);
                y1 = y1.max(p[1]);
            }
            RawAnnotation {
                id: i.id,
                image_id: i.image_id,
                category_id: i.category_id,
                segmentation: i
                    .polygons
                    .iter()
                    .map(|r| r.iter().flat_map(|p| [p[0], p[1]]).collect())
                    .collect(),
                leaf_area_cm2: Some(i.gt_area_cm2),
                area: Some(i.bitmask.count() as f64),
                bbox: Some([x0, y0, x1 - x0, y1 - y0]),
                iscrowd: 0,
            }
        })
        .collect();
    let mut categories: Vec<RawCategory> = dataset
        .categories
        .iter()
        .map(|(&id, name)| RawCategory {
            id,
            name: name.clone(),
        })
        .collect();
    if categories.is_empty() {
        categories.push(RawCategory {
            id: 1,
            name: "leaf".into(),
        });
    }
    let raw = RawDataset {
        split: Some(dataset.split),
        images,
        annotations,
        categories,
    };
    let text = serde_json::to_string_pretty(&raw).map_err(|source| DatasetError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Splits by image into `k` (train, validation) pairs. Image ids are
/// shuffled with `seed` and cut into contiguous folds; the first
/// `n mod k` folds take one extra image.
pub fn kfold_split(
    dataset: &Dataset,
    k: usize,
    seed: u64,
) -> Result<Vec<(Dataset, Dataset)>, DatasetError> {
    let mut ids = dataset.image_ids();
    let n = ids.len();
    if k < 2 || k > n {
        return Err(DatasetError::BadFoldCount { k, images: n });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let val_ids: BTreeSet<u64> = ids[start..start + size].iter().copied().collect();
        let train_ids: BTreeSet<u64> = ids
            .iter()
            .copied()
            .filter(|id| !val_ids.contains(id))
            .collect();
        let mut train = dataset.subset(&train_ids);
        train.split = SplitTag::Train;
        let mut val = dataset.subset(&val_ids);
        val.split = SplitTag::Val;
        folds.push((train, val));
        start += size;
    }
    Ok(folds)
}

/// One row of the results CSV. `pred_area_cm2` is empty and `error` is set
/// when the instance failed; `distance_m` is empty when the mask has no
/// valid depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub image_id: u64,
    pub instance_id: u64,
    pub pred_area_cm2: Option<f64>,
    pub gt_area_cm2: f64,
    pub ioa: f64,
    pub confidence: f64,
    pub distance_m: Option<f64>,
    pub error: Option<String>,
}

pub const RESULTS_HEADER: [&str; 8] = [
    "image_id",
    "instance_id",
    "pred_area_cm2",
    "gt_area_cm2",
    "ioa",
    "confidence",
    "distance_m",
    "error",
];

pub fn write_results_to(rows: &[ResultRow], w: impl std::io::Write) -> Result<(), csv::Error> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(RESULTS_HEADER)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_results(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_results_to(rows, std::io::BufWriter::new(file)).map_err(|source| DatasetError::Csv {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>, DatasetError> {
    let path = path.as_ref();
    let csv_err = |source| DatasetError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    rd.deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .map_err(csv_err)
}
