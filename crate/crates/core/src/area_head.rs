//! Per-instance area head: a masked stack of 1×1 convolutions with group
//! normalization, a per-pixel area map and its sum, losses, and analytic
//! gradients checked against central finite differences.
//!
//! Tensors are stored channel-major: value `(c, p)` of a `C×H×W` map lives at
//! `c * H * W + p` with `p = y * W + x`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum AreaHeadError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("mask value {0} outside [0, 1]")]
    MaskRange(f64),
    #[error("ground-truth area {0} is not a valid target")]
    InvalidTarget(f64),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("weights JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("features file: {0}")]
    Npy(String),
    #[error("mask image: {0}")]
    Image(#[from] image::ImageError),
}

/// `C×H×W` feature tensor for one instance crop.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub channel_semantics: Vec<String>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, AreaHeadError> {
        if channels == 0 {
            return Err(AreaHeadError::DimensionMismatch(
                "feature map needs at least one channel".into(),
            ));
        }
        if data.len() != channels * height * width {
            return Err(AreaHeadError::DimensionMismatch(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AreaHeadError::NonFinite("features"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            channel_semantics: Vec::new(),
        })
    }

    pub fn constant(
        channels: usize,
        height: usize,
        width: usize,
        value: f64,
    ) -> Result<Self, AreaHeadError> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }
}

/// Binary or soft `H×W` instance mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, AreaHeadError> {
        if data.len() != height * width {
            return Err(AreaHeadError::DimensionMismatch(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AreaHeadError::MaskRange(v));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1.0; height * width],
        }
    }

    pub fn from_bitmask(mask: &crate::raster::Bitmask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            data: mask
                .as_slice()
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::LeakyRelu if v < 0.0 => LEAKY_SLOPE * v,
            Self::LeakyRelu => v,
        }
    }

    fn derivative(self, v: f64) -> f64 {
        match self {
            _ if v > 0.0 => 1.0,
            Self::Relu => 0.0,
            Self::LeakyRelu => LEAKY_SLOPE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    L1,
    Mse,
    Huber { delta: f64 },
}

impl LossKind {
    fn value(self, r: f64) -> f64 {
        match self {
            Self::L1 => r.abs(),
            Self::Mse => r * r,
            Self::Huber { delta } if r.abs() <= delta => 0.5 * r * r,
            Self::Huber { delta } => delta * (r.abs() - 0.5 * delta),
        }
    }

    fn derivative(self, r: f64) -> f64 {
        match self {
            Self::L1 if r == 0.0 => 0.0,
            Self::L1 => r.signum(),
            Self::Mse => 2.0 * r,
            Self::Huber { delta } => r.clamp(-delta, delta),
        }
    }
}

/// Loss between a predicted and a ground-truth area. The unknown-area
/// sentinel (and any negative target) is rejected.
pub fn area_loss(pred: f64, gt: f64, kind: LossKind) -> Result<f64, AreaHeadError> {
    if !(gt >= 0.0) {
        return Err(AreaHeadError::InvalidTarget(gt));
    }
    if let LossKind::Huber { delta } = kind {
        if !(delta > 0.0) {
            return Err(AreaHeadError::InvalidParams(format!(
                "huber delta {delta} must be positive"
            )));
        }
    }
    Ok(kind.value(pred - gt))
}

/// Weights of the head. `conv_weights[k][i][o]` maps input channel `i` to
/// output channel `o` of layer `k`; `norm_scale` and `norm_shift` are the
/// per-channel group-norm affine terms (empty means unit scale, zero shift).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaHeadParams {
    pub conv_weights: Vec<Vec<Vec<f64>>>,
    pub pred_weight: Vec<f64>,
    #[serde(default)]
    pub norm_scale: Vec<Vec<f64>>,
    #[serde(default)]
    pub norm_shift: Vec<Vec<f64>>,
    pub activation: Activation,
    #[serde(default = "default_groups")]
    pub norm_groups: usize,
    /// Skip group normalization entirely.
    #[serde(default)]
    pub identity_norm: bool,
    pub loss: LossKind,
}

fn default_groups() -> usize {
    1
}

impl AreaHeadParams {
    /// Single-channel pass-through: every weight 1, normalization off.
    pub fn identity(n_layers: usize, activation: Activation) -> Self {
        let mut p = Self {
            conv_weights: vec![vec![vec![1.0]]; n_layers],
            pred_weight: vec![1.0],
            norm_scale: Vec::new(),
            norm_shift: Vec::new(),
            activation,
            norm_groups: 1,
            identity_norm: true,
            loss: LossKind::L1,
        };
        p.fill_norm_defaults();
        p
    }

    /// Random weights for the channel chain `channels[0] → … → channels[n]`,
    /// with Gaussian-like scale `1/sqrt(c_in)` and perturbed affine terms.
    pub fn random(
        channels: &[usize],
        activation: Activation,
        norm_groups: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv_weights = channels
            .windows(2)
            .map(|w| {
                let s = 1.0 / (w[0] as f64).sqrt();
                (0..w[0])
                    .map(|_| (0..w[1]).map(|_| rng.gen_range(-s..s)).collect())
                    .collect()
            })
            .collect();
        let last = *channels.last().unwrap_or(&1);
        let pred_weight = (0..last).map(|_| rng.gen_range(0.2..1.0)).collect();
        let norm_scale = channels[1..]
            .iter()
            .map(|&c| (0..c).map(|_| rng.gen_range(0.5..1.5)).collect())
            .collect();
        let norm_shift = channels[1..]
            .iter()
            .map(|&c| (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .collect();
        Self {
            conv_weights,
            pred_weight,
            norm_scale,
            norm_shift,
            activation,
            norm_groups,
            identity_norm: false,
            loss: LossKind::L1,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.conv_weights.len()
    }

    pub fn input_channels(&self) -> usize {
        self.conv_weights.first().map_or(0, Vec::len)
    }

    fn layer_dims(&self, k: usize) -> (usize, usize) {
        let w = &self.conv_weights[k];
        (w.len(), w.first().map_or(0, Vec::len))
    }

    /// Replaces empty affine terms with unit scale and zero shift.
    pub fn fill_norm_defaults(&mut self) {
        let outs: Vec<usize> = (0..self.n_layers()).map(|k| self.layer_dims(k).1).collect();
        if self.norm_scale.is_empty() {
            self.norm_scale = outs.iter().map(|&c| vec![1.0; c]).collect();
        }
        if self.norm_shift.is_empty() {
            self.norm_shift = outs.iter().map(|&c| vec![0.0; c]).collect();
        }
    }

    pub fn validate(&self) -> Result<(), AreaHeadError> {
        let bad = |m: String| Err(AreaHeadError::InvalidParams(m));
        if self.n_layers() == 0 {
            return bad("at least one conv layer is required".into());
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be at least 1".into());
        }
        let mut c_prev = self.input_channels();
        for (k, w) in self.conv_weights.iter().enumerate() {
            let (c_in, c_out) = self.layer_dims(k);
            if c_in == 0 || c_out == 0 || w.iter().any(|row| row.len() != c_out) {
                return bad(format!(
                    "layer {k} kernel is not a rectangular C_in x C_out matrix"
                ));
            }
            if c_in != c_prev {
                return bad(format!(
                    "layer {k} expects {c_in} channels but receives {c_prev}"
                ));
            }
            if c_out % self.norm_groups != 0 {
                return bad(format!(
                    "norm_groups {} does not divide layer {k} width {c_out}",
                    self.norm_groups
                ));
            }
            if self.norm_scale.get(k).map(Vec::len) != Some(c_out)
                || self.norm_shift.get(k).map(Vec::len) != Some(c_out)
            {
                return bad(format!(
                    "layer {k} norm scale/shift must have {c_out} entries"
                ));
            }
            c_prev = c_out;
        }
        if self.pred_weight.len() != c_prev {
            return bad(format!(
                "pred_weight has {} entries, expected {c_prev}",
                self.pred_weight.len()
            ));
        }
        if let LossKind::Huber { delta } = self.loss {
            if !(delta > 0.0) {
                return bad(format!("huber delta {delta} must be positive"));
            }
        }
        let all = self
            .conv_weights
            .iter()
            .flatten()
            .flatten()
            .chain(&self.pred_weight)
            .chain(self.norm_scale.iter().flatten())
            .chain(self.norm_shift.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(AreaHeadError::NonFinite("parameters"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, AreaHeadError> {
        let mut p: Self = serde_json::from_str(text)?;
        p.fill_norm_defaults();
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AreaHeadError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AreaHeadError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn param_count(&self) -> usize {
        let conv: usize = self.conv_weights.iter().map(|w| w.len() * w[0].len()).sum();
        let norm: usize = if self.identity_norm {
            0
        } else {
            2 * self.norm_scale.iter().map(Vec::len).sum::<usize>()
        };
        conv + self.pred_weight.len() + norm
    }

    /// Mutable access to the `i`-th scalar in the order conv, pred, scale,
    /// shift, with a readable name.
    fn param_mut(&mut self, mut i: usize) -> (String, &mut f64) {
        for (k, w) in self.conv_weights.iter_mut().enumerate() {
            let n = w.len() * w[0].len();
            if i < n {
                let c_out = w[0].len();
                return (
                    format!("conv[{k}][{}][{}]", i / c_out, i % c_out),
                    &mut w[i / c_out][i % c_out],
                );
            }
            i -= n;
        }
        if i < self.pred_weight.len() {
            return (format!("pred[{i}]"), &mut self.pred_weight[i]);
        }
        i -= self.pred_weight.len();
        for (name, table) in [
            ("scale", &mut self.norm_scale),
            ("shift", &mut self.norm_shift),
        ] {
            for (k, v) in table.iter_mut().enumerate() {
                if i < v.len() {
                    return (format!("{name}[{k}][{i}]"), &mut v[i]);
                }
                i -= v.len();
            }
        }
        unreachable!("parameter index out of range")
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadOutput {
    /// Predicted area, the sum of the per-pixel map.
    pub area: f64,
    /// `H×W` per-pixel area contributions.
    pub pixel_map: Vec<f64>,
}

struct LayerCache {
    input: Vec<f64>,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    pre_activation: Vec<f64>,
}

struct Trace {
    layers: Vec<LayerCache>,
    last: Vec<f64>,
    pre_pred: Vec<f64>,
    output: HeadOutput,
}

fn check_inputs(
    features: &FeatureMap,
    mask: &InstanceMask,
    params: &AreaHeadParams,
) -> Result<(), AreaHeadError> {
    params.validate()?;
    if (features.height, features.width) != (mask.height, mask.width) {
        return Err(AreaHeadError::DimensionMismatch(format!(
            "features are {}x{} but mask is {}x{}",
            features.height, features.width, mask.height, mask.width
        )));
    }
    if features.channels != params.input_channels() {
        return Err(AreaHeadError::DimensionMismatch(format!(
            "features have {} channels, head expects {}",
            features.channels,
            params.input_channels()
        )));
    }
    if features.data.iter().any(|v| !v.is_finite()) {
        return Err(AreaHeadError::NonFinite("features"));
    }
    Ok(())
}

fn run(features: &FeatureMap, mask: &InstanceMask, params: &AreaHeadParams) -> Trace {
    let np = features.height * features.width;
    let m = &mask.data;
    let mut x: Vec<f64> = features
        .data
        .chunks(np)
        .flat_map(|ch| ch.iter().zip(m).map(|(f, g)| f * g))
        .collect();
    let mut layers = Vec::with_capacity(params.n_layers());
    for k in 0..params.n_layers() {
        let (c_in, c_out) = params.layer_dims(k);
        let w = &params.conv_weights[k];
        let mut z = vec![0.0; c_out * np];
        for i in 0..c_in {
            let xi = &x[i * np..(i + 1) * np];
            for o in 0..c_out {
                let wio = w[i][o];
                for (zv, xv) in z[o * np..(o + 1) * np].iter_mut().zip(xi) {
                    *zv += wio * xv;
                }
            }
        }
        let (normalized, inv_std, y) = if params.identity_norm {
            (Vec::new(), Vec::new(), z)
        } else {
            let cg = c_out / params.norm_groups;
            let mut zhat = vec![0.0; c_out * np];
            let mut inv_std = Vec::with_capacity(params.norm_groups);
            for g in 0..params.norm_groups {
                let span = g * cg * np..(g + 1) * cg * np;
                let n = span.len() as f64;
                let mean = z[span.clone()].iter().sum::<f64>() / n;
                let var = z[span.clone()]
                    .iter()
                    .map(|v| (v - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let s = 1.0 / (var + NORM_EPS).sqrt();
                for j in span {
                    zhat[j] = (z[j] - mean) * s;
                }
                inv_std.push(s);
            }
            let (gamma, beta) = (&params.norm_scale[k], &params.norm_shift[k]);
            let y = zhat
                .chunks(np)
                .zip(gamma.iter().zip(beta))
                .flat_map(|(ch, (g, b))| ch.iter().map(move |v| g * v + b))
                .collect();
            (zhat, inv_std, y)
        };
        let next = y
            .chunks(np)
            .flat_map(|ch| {
                ch.iter()
                    .zip(m)
                    .map(|(v, g)| params.activation.apply(*v) * g)
            })
            .collect();
        layers.push(LayerCache {
            input: std::mem::replace(&mut x, next),
            normalized,
            inv_std,
            pre_activation: y,
        });
    }
    let mut s = vec![0.0; np];
    for (ch, wp) in x.chunks(np).zip(&params.pred_weight) {
        for (sv, xv) in s.iter_mut().zip(ch) {
            *sv += wp * xv;
        }
    }
    let pixel_map: Vec<f64> = s.iter().map(|v| v.max(0.0)).collect();
    let area = pixel_map.iter().sum();
    Trace {
        layers,
        last: x,
        pre_pred: s,
        output: HeadOutput { area, pixel_map },
    }
}

/// Predicted area and per-pixel map for one instance.
///
/// The mask gates the input and every hidden layer, so masked-out pixels
/// contribute exactly zero even though group normalization shifts them.
pub fn forward(
    features: &FeatureMap,
    mask: &InstanceMask,
    params: &AreaHeadParams,
) -> Result<HeadOutput, AreaHeadError> {
    check_inputs(features, mask, params)?;
    let out = run(features, mask, params).output;
    if !out.area.is_finite() {
        return Err(AreaHeadError::NonFinite("predicted area"));
    }
    Ok(out)
}

/// Gradients with the same layout as [`AreaHeadParams`]. Scale and shift
/// gradients are zero in identity-norm mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gradients {
    pub conv_weights: Vec<Vec<Vec<f64>>>,
    pub pred_weight: Vec<f64>,
    pub norm_scale: Vec<Vec<f64>>,
    pub norm_shift: Vec<Vec<f64>>,
}

impl Gradients {
    fn flat(&self, identity_norm: bool) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .conv_weights
            .iter()
            .flatten()
            .flatten()
            .copied()
            .collect();
        v.extend(&self.pred_weight);
        if !identity_norm {
            v.extend(self.norm_scale.iter().flatten());
            v.extend(self.norm_shift.iter().flatten());
        }
        v
    }
}

/// Loss of the forward pass against `gt` and its gradient with respect to
/// every parameter.
pub fn loss_and_gradients(
    params: &AreaHeadParams,
    features: &FeatureMap,
    mask: &InstanceMask,
    gt: f64,
) -> Result<(f64, Gradients), AreaHeadError> {
    check_inputs(features, mask, params)?;
    let trace = run(features, mask, params);
    let loss = area_loss(trace.output.area, gt, params.loss)?;
    let dl_da = params.loss.derivative(trace.output.area - gt);
    let np = features.height * features.width;
    let m = &mask.data;

    let ds: Vec<f64> = trace
        .pre_pred
        .iter()
        .map(|&s| if s > 0.0 { dl_da } else { 0.0 })
        .collect();
    let pred_weight = trace
        .last
        .chunks(np)
        .map(|ch| ch.iter().zip(&ds).map(|(x, d)| x * d).sum())
        .collect();
    let mut dx: Vec<f64> = params
        .pred_weight
        .iter()
        .flat_map(|w| ds.iter().map(move |d| w * d))
        .collect();

    let n = params.n_layers();
    let mut conv_weights = vec![Vec::new(); n];
    let mut norm_scale = vec![Vec::new(); n];
    let mut norm_shift = vec![Vec::new(); n];
    for k in (0..n).rev() {
        let cache = &trace.layers[k];
        let (c_in, c_out) = params.layer_dims(k);
        let dy: Vec<f64> = dx
            .chunks(np)
            .zip(cache.pre_activation.chunks(np))
            .flat_map(|(dch, ych)| {
                dch.iter()
                    .zip(ych)
                    .zip(m)
                    .map(|((d, y), g)| d * g * params.activation.derivative(*y))
            })
            .collect();
        let dz = if params.identity_norm {
            norm_scale[k] = vec![0.0; c_out];
            norm_shift[k] = vec![0.0; c_out];
            dy
        } else {
            let gamma = &params.norm_scale[k];
            norm_scale[k] = (0..c_out)
                .map(|o| {
                    let r = o * np..(o + 1) * np;
                    dy[r.clone()]
                        .iter()
                        .zip(&cache.normalized[r])
                        .map(|(d, h)| d * h)
                        .sum()
                })
                .collect();
            norm_shift[k] = dy.chunks(np).map(|ch| ch.iter().sum()).collect();
            let dzhat: Vec<f64> = dy
                .chunks(np)
                .zip(gamma)
                .flat_map(|(ch, g)| ch.iter().map(move |d| d * g))
                .collect();
            let cg = c_out / params.norm_groups;
            let mut dz = vec![0.0; c_out * np];
            for g in 0..params.norm_groups {
                let span = g * cg * np..(g + 1) * cg * np;
                let len = span.len() as f64;
                let mean_d = dzhat[span.clone()].iter().sum::<f64>() / len;
                let mean_dh = dzhat[span.clone()]
                    .iter()
                    .zip(&cache.normalized[span.clone()])
                    .map(|(d, h)| d * h)
                    .sum::<f64>()
                    / len;
                for j in span {
                    dz[j] = cache.inv_std[g] * (dzhat[j] - mean_d - cache.normalized[j] * mean_dh);
                }
            }
            dz
        };
        let x = &cache.input;
        conv_weights[k] = (0..c_in)
            .map(|i| {
                let xi = &x[i * np..(i + 1) * np];
                (0..c_out)
                    .map(|o| {
                        xi.iter()
                            .zip(&dz[o * np..(o + 1) * np])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let w = &params.conv_weights[k];
        let mut dprev = vec![0.0; c_in * np];
        for i in 0..c_in {
            for o in 0..c_out {
                let wio = w[i][o];
                for (d, z) in dprev[i * np..(i + 1) * np]
                    .iter_mut()
                    .zip(&dz[o * np..(o + 1) * np])
                {
                    *d += wio * z;
                }
            }
        }
        dx = dprev;
    }
    let grads = Gradients {
        conv_weights,
        pred_weight,
        norm_scale,
        norm_shift,
    };
    Ok((loss, grads))
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation crosses an activation or loss kink.
    pub excluded: Vec<String>,
}

/// Signs of every kink argument: hidden pre-activations, the final ReLU
/// input and the loss residual.
fn kink_signature(trace: &Trace, params: &AreaHeadParams, gt: f64) -> Vec<i8> {
    let sign = |v: f64| (v > 0.0) as i8 - (v < 0.0) as i8;
    let mut sig: Vec<i8> = trace
        .layers
        .iter()
        .flat_map(|l| l.pre_activation.iter().map(|&v| sign(v)))
        .chain(trace.pre_pred.iter().map(|&v| sign(v)))
        .collect();
    let r = trace.output.area - gt;
    sig.push(match params.loss {
        LossKind::L1 => sign(r),
        LossKind::Huber { delta } => sign(r.abs() - delta),
        LossKind::Mse => 0,
    });
    sig
}

/// Compares analytic gradients with central differences of step `h` for
/// every parameter and returns the largest relative error.
///
/// A parameter is excluded when `±h` changes the sign pattern of any kink
/// argument, since the loss is not differentiable there.
pub fn grad_check(
    params: &AreaHeadParams,
    features: &FeatureMap,
    mask: &InstanceMask,
    gt: f64,
    h: f64,
) -> Result<GradCheckReport, AreaHeadError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(AreaHeadError::InvalidParams(format!(
            "finite-difference step {h} must be positive"
        )));
    }
    let (_, grads) = loss_and_gradients(params, features, mask, gt)?;
    let analytic = grads.flat(params.identity_norm);
    let base = kink_signature(&run(features, mask, params), params, gt);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut probe = params.clone();
    for (i, &a) in analytic.iter().enumerate().take(params.param_count()) {
        let (name, slot) = probe.param_mut(i);
        let original = *slot;
        if !a.is_finite() {
            return Err(AreaHeadError::NonFiniteGradient(name));
        }
        let eval = |p: &mut AreaHeadParams, v: f64| {
            *p.param_mut(i).1 = v;
            let t = run(features, mask, p);
            (kink_signature(&t, p, gt), p.loss.value(t.output.area - gt))
        };
        let (sig_plus, l_plus) = eval(&mut probe, original + h);
        let (sig_minus, l_minus) = eval(&mut probe, original - h);
        *probe.param_mut(i).1 = original;
        if sig_plus != base || sig_minus != base {
            report.excluded.push(name);
            continue;
        }
        let numeric = (l_plus - l_minus) / (2.0 * h);
        if !numeric.is_finite() {
            return Err(AreaHeadError::NonFiniteGradient(name));
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Reads a `C×H×W` (or `H×W`, one channel) float32/float64 `.npy` array in
/// C order.
pub fn load_features_npy(path: impl AsRef<Path>) -> Result<FeatureMap, AreaHeadError> {
    let bytes = fs::read(path)?;
    let npy_err = |e: std::io::Error| AreaHeadError::Npy(e.to_string());
    let header = npyz::NpyFile::new(&bytes[..]).map_err(npy_err)?;
    if header.order() != npyz::Order::C && header.shape().len() > 1 {
        return Err(AreaHeadError::Npy(
            "Fortran-ordered arrays are not supported".into(),
        ));
    }
    let shape: Vec<usize> = header.shape().iter().map(|&d| d as usize).collect();
    let (c, hh, ww) = match shape[..] {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => {
            return Err(AreaHeadError::Npy(format!(
                "expected a 2-D or 3-D array, found shape {shape:?}"
            )))
        }
    };
    let data = match header.into_vec::<f64>() {
        Ok(v) => v,
        Err(_) => npyz::NpyFile::new(&bytes[..])
            .and_then(|f| f.into_vec::<f32>())
            .map_err(|e| AreaHeadError::Npy(format!("expected float32 or float64 data: {e}")))?
            .into_iter()
            .map(f64::from)
            .collect(),
    };
    FeatureMap::new(c, hh, ww, data)
}

/// Writes a feature map as a float64 `.npy` array of shape `C×H×W`.
pub fn save_features_npy(
    features: &FeatureMap,
    path: impl AsRef<Path>,
) -> Result<(), AreaHeadError> {
    use npyz::WriterBuilder;
    let shape = [
        features.channels as u64,
        features.height as u64,
        features.width as u64,
    ];
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    let mut writer = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape)
        .writer(file)
        .begin_nd()?;
    writer.extend(features.data.iter().copied())?;
    writer.finish()?;
    Ok(())
}

/// Loads a grayscale PNG as a soft mask, scaling intensities to `[0, 1]`.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<InstanceMask, AreaHeadError> {
    let img = image::open(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v).clamp(0.0, 1.0))
        .collect();
    InstanceMask::new(h as usize, w as usize, data)
}
