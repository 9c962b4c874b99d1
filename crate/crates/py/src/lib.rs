//! Python module `leafarea3d`.
//!
//! Rasters cross the boundary as nested lists (rows of values), point sets as
//! lists of `[x, y, z]`. Structured results come back as plain dicts.

use std::fmt::Display;

use image::RgbImage;
use nalgebra::Vector3;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use leafarea3d_core::area_head::{
    self, Activation, AreaHeadParams, FeatureMap, InstanceMask, DEFAULT_FD_STEP,
};
use leafarea3d_core::batch;
use leafarea3d_core::camera::{CameraIntrinsics, RgbdFrame};
use leafarea3d_core::cloud::{self, DbscanParams};
use leafarea3d_core::dataset::{self, ResultRow};
use leafarea3d_core::depth_filter::{self, BilateralParams};
use leafarea3d_core::evaluation::{self, EvalConfig};
use leafarea3d_core::mesh::{self, TriangleMesh};
use leafarea3d_core::pipeline::{self, PipelineConfig};
use leafarea3d_core::raster::{Bitmask, DepthRaster};
use leafarea3d_core::synthetic::{self, NoiseSpec, SynthSpec};

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes through JSON into Python dicts, lists and scalars.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    text.map_or_else(
        || Ok(T::default()),
        |t| serde_json::from_str(t).map_err(err),
    )
}

fn grid_dims<T>(rows: &[Vec<T>]) -> PyResult<(usize, usize)> {
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(err("rows must all have the same length"));
    }
    Ok((w, rows.len()))
}

fn to_raster(rows: Vec<Vec<f32>>) -> PyResult<DepthRaster> {
    let (w, h) = grid_dims(&rows)?;
    DepthRaster::from_vec(w, h, rows.into_iter().flatten().collect()).map_err(err)
}

fn from_raster(r: &DepthRaster) -> Vec<Vec<f32>> {
    (0..r.height()).map(|y| r.row(y).to_vec()).collect()
}

fn to_bitmask(rows: Vec<Vec<bool>>) -> PyResult<Bitmask> {
    let (w, h) = grid_dims(&rows)?;
    Bitmask::from_vec(w, h, rows.into_iter().flatten().collect()).map_err(err)
}

#[pyclass(name = "Intrinsics", skip_from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(CameraIntrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> PyResult<Self> {
        CameraIntrinsics::new(fx, fy, cx, cy, width, height)
            .map(Self)
            .map_err(err)
    }

    /// 1280×720 color-aligned intrinsics of a typical consumer depth camera.
    #[staticmethod]
    fn d415() -> Self {
        Self(CameraIntrinsics::d415_1280x720())
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height
    }

    fn project(&self, x: f64, y: f64, z: f64) -> (f64, f64) {
        self.0.project(&Vector3::new(x, y, z))
    }

    fn backproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        let p = self.0.backproject(u, v, z);
        [p.x, p.y, p.z]
    }

    fn __repr__(&self) -> String {
        let k = &self.0;
        format!(
            "Intrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        )
    }
}

#[pyfunction]
#[pyo3(signature = (depth, d=10, sigma_color=150.0, sigma_space=50.0))]
fn bilateral_filter(
    depth: Vec<Vec<f32>>,
    d: usize,
    sigma_color: f64,
    sigma_space: f64,
) -> PyResult<Vec<Vec<f32>>> {
    let params = BilateralParams {
        d,
        sigma_color,
        sigma_space,
    };
    let out = depth_filter::bilateral_filter(&to_raster(depth)?, &params).map_err(err)?;
    Ok(from_raster(&out))
}

#[pyfunction]
#[pyo3(signature = (depth, kernel=5))]
fn median_filter(depth: Vec<Vec<f32>>, kernel: usize) -> PyResult<Vec<Vec<f32>>> {
    let out = depth_filter::median_filter(&to_raster(depth)?, kernel).map_err(err)?;
    Ok(from_raster(&out))
}

/// Labels per point; `None` marks noise.
#[pyfunction]
#[pyo3(signature = (points, eps=0.01, min_pts=30))]
fn dbscan_labels(points: Vec<[f64; 3]>, eps: f64, min_pts: usize) -> PyResult<Vec<Option<usize>>> {
    let pts: Vec<_> = points
        .iter()
        .map(|&[x, y, z]| Vector3::new(x, y, z))
        .collect();
    cloud::dbscan_labels(&pts, &DbscanParams { eps, min_pts }).map_err(err)
}

#[pyfunction]
fn surface_area(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> PyResult<f64> {
    let m = TriangleMesh::new(
        vertices
            .iter()
            .map(|&[x, y, z]| Vector3::new(x, y, z))
            .collect(),
        triangles,
    );
    if !m.is_valid() {
        return Err(err("triangle index out of range"));
    }
    Ok(mesh::surface_area(&m))
}

/// Area of one masked leaf. `config` is a JSON object of pipeline
/// parameters; omitted fields keep their defaults.
#[pyfunction]
#[pyo3(signature = (depth, mask, intrinsics, depth_scale=0.001, config=None))]
fn estimate_leaf_area(
    py: Python<'_>,
    depth: Vec<Vec<f32>>,
    mask: Vec<Vec<bool>>,
    intrinsics: PyRef<'_, PyIntrinsics>,
    depth_scale: f64,
    config: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let cfg: PipelineConfig = parse_json(config)?;
    let depth = to_raster(depth)?;
    let color = RgbImage::new(depth.width() as u32, depth.height() as u32);
    let frame = RgbdFrame::new(color, depth, depth_scale, intrinsics.0).map_err(err)?;
    let mask = to_bitmask(mask)?;
    let est = py
        .detach(|| pipeline::estimate_leaf_area_ip(&frame, &mask, &cfg))
        .map_err(err)?;
    #[derive(Serialize)]
    struct Out<'a> {
        area_cm2: f64,
        diagnostics: &'a pipeline::PipelineDiagnostics,
    }
    to_py(
        py,
        &Out {
            area_cm2: est.area_cm2,
            diagnostics: &est.diagnostics,
        },
    )
}

/// Estimates every instance of an annotation file. Returns the result rows
/// and writes them as CSV when `out_csv` is given.
#[pyfunction]
#[pyo3(signature = (annotations, config=None, workers=1, out_csv=None))]
fn estimate_dataset(
    py: Python<'_>,
    annotations: &str,
    config: Option<&str>,
    workers: usize,
    out_csv: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let cfg: PipelineConfig = parse_json(config)?;
    let ds = dataset::load_dataset(annotations).map_err(err)?;
    let rows = py
        .detach(|| batch::estimate_dataset(&ds, &cfg, workers))
        .map_err(err)?;
    if let Some(path) = out_csv {
        dataset::write_results(&rows, path).map_err(err)?;
    }
    to_py(py, &rows)
}

/// Scores a results CSV. Ground truth comes from `annotations` when given,
/// else from the CSV's own gt column.
#[pyfunction]
#[pyo3(signature = (results_csv, annotations=None, config=None))]
fn evaluate_results(
    py: Python<'_>,
    results_csv: &str,
    annotations: Option<&str>,
    config: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let cfg: EvalConfig = parse_json(config)?;
    let rows: Vec<ResultRow> = dataset::read_results(results_csv).map_err(err)?;
    let gt = match annotations {
        Some(path) => Some(batch::ground_truth_rows(
            &dataset::load_dataset(path).map_err(err)?,
        )),
        None => None,
    };
    let report = evaluation::evaluate_results(&rows, gt.as_deref(), &cfg).map_err(err)?;
    to_py(py, &report)
}

#[pyfunction]
fn intersection_over_area(pred: Vec<Vec<bool>>, gt: Vec<Vec<bool>>) -> PyResult<f64> {
    evaluation::intersection_over_area(&to_bitmask(pred)?, &to_bitmask(gt)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (preds, gts, threshold=evaluation::DEFAULT_IOA_THRESHOLD))]
fn match_instances(
    py: Python<'_>,
    preds: Vec<Vec<Vec<bool>>>,
    gts: Vec<Vec<Vec<bool>>>,
    threshold: f64,
) -> PyResult<Py<PyAny>> {
    let preds = preds
        .into_iter()
        .map(to_bitmask)
        .collect::<PyResult<Vec<_>>>()?;
    let gts = gts
        .into_iter()
        .map(to_bitmask)
        .collect::<PyResult<Vec<_>>>()?;
    let m = evaluation::match_instances(&preds, &gts, threshold).map_err(err)?;
    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(flatten)]
        result: &'a evaluation::MatchResult,
        precision: f64,
        recall: f64,
        f1: f64,
    }
    to_py(
        py,
        &Out {
            result: &m,
            precision: m.precision(),
            recall: m.recall(),
            f1: m.f1(),
        },
    )
}

#[pyfunction]
fn regression_metrics(py: Python<'_>, pred: Vec<f64>, gt: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(
        py,
        &evaluation::regression_metrics(&pred, &gt).map_err(err)?,
    )
}

/// Renders a synthetic dataset and returns the number of leaves written.
#[pyfunction]
#[pyo3(signature = (out_dir, n=30, distances=None, noise=true, seed=42))]
fn synthesize(
    out_dir: &str,
    n: usize,
    distances: Option<Vec<f64>>,
    noise: bool,
    seed: u64,
) -> PyResult<usize> {
    let mut spec = SynthSpec {
        n,
        seed,
        noise: if noise {
            NoiseSpec::default()
        } else {
            NoiseSpec::none()
        },
        ..Default::default()
    };
    if let Some(d) = distances {
        spec.distances_m = d;
    }
    let ds = synthetic::write_synthetic_dataset(&spec, out_dir).map_err(err)?;
    Ok(ds.instances.len())
}

fn activation(name: &str) -> PyResult<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "leaky_relu" => Ok(Activation::LeakyRelu),
        other => Err(err(format!(
            "unknown activation {other:?} (expected relu or leaky_relu)"
        ))),
    }
}

fn to_features(features: Vec<Vec<Vec<f64>>>) -> PyResult<FeatureMap> {
    let c = features.len();
    let (w, h) = features.first().map_or(Ok((0, 0)), |ch| grid_dims(ch))?;
    let mut data = Vec::with_capacity(c * h * w);
    for ch in features {
        if grid_dims(&ch)? != (w, h) {
            return Err(err("feature channels must share one shape"));
        }
        data.extend(ch.into_iter().flatten());
    }
    FeatureMap::new(c, h, w, data).map_err(err)
}

fn to_mask(mask: Vec<Vec<f64>>) -> PyResult<InstanceMask> {
    let (w, h) = grid_dims(&mask)?;
    InstanceMask::new(h, w, mask.into_iter().flatten().collect()).map_err(err)
}

/// Per-instance area head: 1×1 convolutions with group normalization over a
/// masked feature map, summed to one area.
#[pyclass(name = "AreaHead", skip_from_py_object)]
#[derive(Clone)]
struct PyAreaHead(AreaHeadParams);

#[pymethods]
impl PyAreaHead {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        AreaHeadParams::from_json(text).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        AreaHeadParams::load(path).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (n_layers, activation="relu"))]
    fn identity(n_layers: usize, activation: &str) -> PyResult<Self> {
        Ok(Self(AreaHeadParams::identity(
            n_layers,
            self::activation(activation)?,
        )))
    }

    #[staticmethod]
    #[pyo3(signature = (channels, activation="relu", norm_groups=1, seed=0))]
    fn random(
        channels: Vec<usize>,
        activation: &str,
        norm_groups: usize,
        seed: u64,
    ) -> PyResult<Self> {
        if channels.len() < 2 {
            return Err(err("channels needs the input width and at least one layer"));
        }
        let p = AreaHeadParams::random(&channels, self::activation(activation)?, norm_groups, seed);
        p.validate().map_err(err)?;
        Ok(Self(p))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.0).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.0.n_layers()
    }

    /// Returns `(area, pixel_map)` with the map as rows.
    fn forward(
        &self,
        features: Vec<Vec<Vec<f64>>>,
        mask: Vec<Vec<f64>>,
    ) -> PyResult<(f64, Vec<Vec<f64>>)> {
        let mask = to_mask(mask)?;
        let out = area_head::forward(&to_features(features)?, &mask, &self.0).map_err(err)?;
        let w = mask.width().max(1);
        Ok((
            out.area,
            out.pixel_map.chunks(w).map(<[f64]>::to_vec).collect(),
        ))
    }

    /// Returns `(loss, gradients)` with gradients shaped like the parameters.
    fn loss_and_gradients(
        &self,
        py: Python<'_>,
        features: Vec<Vec<Vec<f64>>>,
        mask: Vec<Vec<f64>>,
        gt: f64,
    ) -> PyResult<(f64, Py<PyAny>)> {
        let (loss, g) =
            area_head::loss_and_gradients(&self.0, &to_features(features)?, &to_mask(mask)?, gt)
                .map_err(err)?;
        Ok((loss, to_py(py, &g)?))
    }

    #[pyo3(signature = (features, mask, gt, step=DEFAULT_FD_STEP))]
    fn grad_check(
        &self,
        py: Python<'_>,
        features: Vec<Vec<Vec<f64>>>,
        mask: Vec<Vec<f64>>,
        gt: f64,
        step: f64,
    ) -> PyResult<Py<PyAny>> {
        let r = area_head::grad_check(&self.0, &to_features(features)?, &to_mask(mask)?, gt, step)
            .map_err(err)?;
        to_py(py, &r)
    }
}

#[pymodule]
pub fn leafarea3d(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyAreaHead>()?;
    m.add_function(wrap_pyfunction!(bilateral_filter, m)?)?;
    m.add_function(wrap_pyfunction!(median_filter, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan_labels, m)?)?;
    m.add_function(wrap_pyfunction!(surface_area, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_leaf_area, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_results, m)?)?;
    m.add_function(wrap_pyfunction!(intersection_over_area, m)?)?;
    m.add_function(wrap_pyfunction!(match_instances, m)?)?;
    m.add_function(wrap_pyfunction!(regression_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add("M2_TO_CM2", mesh::M2_TO_CM2)?;
    Ok(())
}
