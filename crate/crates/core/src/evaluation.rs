//! Instance metrics: IoA matching, F1, area regression statistics,
//! distance-binned errors and k-fold aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ResultRow;
use crate::raster::{Bitmask, DepthRaster};

pub const DEFAULT_IOA_THRESHOLD: f64 = 0.9;
pub const DEFAULT_CONFIDENCE_CUTOFF: f64 = 0.5;
pub const DEFAULT_BIN_WIDTH_M: f64 = 0.5;
pub const DEFAULT_DISTANCE_RANGE_M: (f64, f64) = (0.5, 2.5);

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("ground-truth mask is empty")]
    EmptyGtMask,
    #[error("{0} predictions but {1} ground truths")]
    LengthMismatch(usize, usize),
    #[error("no values to evaluate")]
    Empty,
    #[error("ground-truth area {0} must be positive")]
    NonPositiveGt(f64),
    #[error("r2 is undefined when all ground-truth areas are equal")]
    UndefinedR2,
    #[error("bad distance binning: {0}")]
    BadBins(String),
    #[error("aggregation needs at least two reports, got {0}")]
    TooFewReports(usize),
}

/// `|pred ∩ gt| / |gt|`.
pub fn intersection_over_area(pred: &Bitmask, gt: &Bitmask) -> Result<f64, EvalError> {
    let (pd, gd) = ((pred.width(), pred.height()), (gt.width(), gt.height()));
    if pd != gd {
        return Err(EvalError::DimensionMismatch(pd, gd));
    }
    let n = gt.count();
    if n == 0 {
        return Err(EvalError::EmptyGtMask);
    }
    Ok(pred.intersection_count(gt) as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub ioa: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn precision(&self) -> f64 {
        ratio(
            self.pairs.len(),
            self.pairs.len() + self.unmatched_preds.len(),
        )
    }

    pub fn recall(&self) -> f64 {
        ratio(
            self.pairs.len(),
            self.pairs.len() + self.unmatched_gts.len(),
        )
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// One-to-one greedy matching in descending IoA order over pairs with IoA at
/// least `threshold`. Ties keep the lower (pred, gt) index pair first. Empty
/// ground-truth masks never match.
pub fn match_instances(
    preds: &[Bitmask],
    gts: &[Bitmask],
    threshold: f64,
) -> Result<MatchResult, EvalError> {
    let mut candidates = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let ioa = match intersection_over_area(p, g) {
                Ok(v) => v,
                Err(EvalError::EmptyGtMask) => continue,
                Err(e) => return Err(e),
            };
            if ioa >= threshold {
                candidates.push(MatchedPair {
                    pred: pi,
                    gt: gi,
                    ioa,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.ioa
            .total_cmp(&a.ioa)
            .then((a.pred, a.gt).cmp(&(b.pred, b.gt)))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for c in candidates {
        if !pred_used[c.pred] && !gt_used[c.gt] {
            pred_used[c.pred] = true;
            gt_used[c.gt] = true;
            result.pairs.push(c);
        }
    }
    result.unmatched_preds = (0..preds.len()).filter(|&i| !pred_used[i]).collect();
    result.unmatched_gts = (0..gts.len()).filter(|&i| !gt_used[i]).collect();
    Ok(result)
}

/// Absolute percentage error `100·|pred − gt| / gt`.
pub fn ape(pred: f64, gt: f64) -> f64 {
    100.0 * (pred - gt).abs() / gt
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub r2: f64,
    pub ape_mean: f64,
    /// Population standard deviation.
    pub ape_std: f64,
    pub ape_median: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation. Values are shifted by the first one so
/// identical inputs give exactly zero.
pub fn population_std(values: &[f64]) -> f64 {
    let Some(&v0) = values.first() else {
        return f64::NAN;
    };
    let shifted: Vec<f64> = values.iter().map(|v| v - v0).collect();
    let m = mean(&shifted);
    (shifted.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Coefficient of determination of `pred` against `gt`.
pub fn r2_score(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gt.len()));
    }
    if gt.is_empty() {
        return Err(EvalError::Empty);
    }
    let m = mean(gt);
    let ss_tot: f64 = gt.iter().map(|g| (g - m).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EvalError::UndefinedR2);
    }
    let ss_res: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// R² and APE statistics. Fails with [`EvalError::UndefinedR2`] when all
/// ground-truth areas are equal; see [`regression_metrics_partial`].
pub fn regression_metrics(pred: &[f64], gt: &[f64]) -> Result<RegressionMetrics, EvalError> {
    let apes = ape_values(pred, gt)?;
    Ok(RegressionMetrics {
        r2: r2_score(pred, gt)?,
        ape_mean: mean(&apes),
        ape_std: population_std(&apes),
        ape_median: median(&apes),
    })
}

/// APE statistics with `r2` left out when it is undefined.
pub fn regression_metrics_partial(
    pred: &[f64],
    gt: &[f64],
) -> Result<(Option<f64>, [f64; 3]), EvalError> {
    let apes = ape_values(pred, gt)?;
    let r2 = match r2_score(pred, gt) {
        Ok(v) => Some(v),
        Err(EvalError::UndefinedR2) => None,
        Err(e) => return Err(e),
    };
    Ok((r2, [mean(&apes), population_std(&apes), median(&apes)]))
}

fn ape_values(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gt.len()));
    }
    if gt.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&g) = gt.iter().find(|&&g| !(g > 0.0)) {
        return Err(EvalError::NonPositiveGt(g));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| ape(*p, *g)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub distance_m: f64,
    pub ape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo_m: f64,
    pub hi_m: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_ape: Option<f64>,
    /// Records outside the range that were clamped into this edge bin.
    pub clamped: usize,
}

/// Groups records into `[lo, lo + w), …, [hi − w, hi]` and reports the mean
/// APE per bin. Out-of-range distances go to the nearest edge bin and are
/// counted in its `clamped` field.
pub fn distance_binned_errors(
    records: &[DistanceRecord],
    bin_width_m: f64,
    range_m: (f64, f64),
) -> Result<Vec<DistanceBin>, EvalError> {
    let (lo, hi) = range_m;
    if !(bin_width_m > 0.0) || !(hi > lo) {
        return Err(EvalError::BadBins(format!(
            "width {bin_width_m} over [{lo}, {hi}]"
        )));
    }
    let n_bins = ((hi - lo) / bin_width_m - 1e-9).ceil().max(1.0) as usize;
    let mut bins: Vec<DistanceBin> = (0..n_bins)
        .map(|i| DistanceBin {
            lo_m: lo + i as f64 * bin_width_m,
            hi_m: (lo + (i + 1) as f64 * bin_width_m).min(hi),
            count: 0,
            mean_ape: None,
            clamped: 0,
        })
        .collect();
    let mut sums = vec![0.0; n_bins];
    for r in records {
        let raw = ((r.distance_m - lo) / bin_width_m + 1e-9).floor();
        let idx = raw.clamp(0.0, (n_bins - 1) as f64) as usize;
        if r.distance_m < lo || r.distance_m > hi {
            bins[idx].clamped += 1;
        }
        bins[idx].count += 1;
        sums[idx] += r.ape;
    }
    for (b, s) in bins.iter_mut().zip(sums) {
        if b.count > 0 {
            b.mean_ape = Some(s / b.count as f64);
        }
    }
    Ok(bins)
}

/// Median depth in meters over the mask's valid (nonzero) pixels.
pub fn instance_distance(depth: &DepthRaster, depth_scale: f64, mask: &Bitmask) -> Option<f64> {
    let zs: Vec<f64> = mask
        .iter_set()
        .filter(|&(x, y)| x < depth.width() && y < depth.height())
        .map(|(x, y)| depth.get(x, y))
        .filter(|&d| d > 0.0)
        .map(|d| f64::from(d) * depth_scale)
        .collect();
    (!zs.is_empty()).then(|| median(&zs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ioa_threshold: f64,
    pub confidence_cutoff: f64,
    pub bin_width_m: f64,
    pub distance_range_m: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ioa_threshold: DEFAULT_IOA_THRESHOLD,
            confidence_cutoff: DEFAULT_CONFIDENCE_CUTOFF,
            bin_width_m: DEFAULT_BIN_WIDTH_M,
            distance_range_m: DEFAULT_DISTANCE_RANGE_M,
        }
    }
}

/// Metric summary for one evaluation run. Regression fields are `None` when
/// no matched pair carries a known area (or, for `r2`, when it is undefined).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub avg_ioa: Option<f64>,
    pub avg_confidence: Option<f64>,
    pub r2: Option<f64>,
    pub ape_mean: Option<f64>,
    pub ape_std: Option<f64>,
    pub ape_median: Option<f64>,
    pub n_predictions: usize,
    pub n_ground_truths: usize,
    pub n_matched: usize,
    /// Matched pairs with a known ground-truth area.
    pub n_regression: usize,
    pub distance_bins: Vec<DistanceBin>,
}

/// One matched prediction: its IoA, confidence, areas and distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedEstimate {
    pub ioa: f64,
    pub confidence: f64,
    pub pred_area_cm2: f64,
    /// Negative when unknown.
    pub gt_area_cm2: f64,
    pub distance_m: Option<f64>,
}

/// Builds a report from counts and the matched estimates.
pub fn build_report(
    n_predictions: usize,
    n_ground_truths: usize,
    matched: &[MatchedEstimate],
    confidences: &[f64],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let precision = ratio(matched.len(), n_predictions);
    let recall = ratio(matched.len(), n_ground_truths);
    let known: Vec<&MatchedEstimate> = matched.iter().filter(|m| m.gt_area_cm2 > 0.0).collect();
    let pred: Vec<f64> = known.iter().map(|m| m.pred_area_cm2).collect();
    let gt: Vec<f64> = known.iter().map(|m| m.gt_area_cm2).collect();
    let (r2, stats) = if known.is_empty() {
        (None, None)
    } else {
        let (r2, s) = regression_metrics_partial(&pred, &gt)?;
        (r2, Some(s))
    };
    let records: Vec<DistanceRecord> = known
        .iter()
        .filter_map(|m| {
            m.distance_m.map(|d| DistanceRecord {
                distance_m: d,
                ape: ape(m.pred_area_cm2, m.gt_area_cm2),
            })
        })
        .collect();
    let ioas: Vec<f64> = matched.iter().map(|m| m.ioa).collect();
    Ok(EvalReport {
        f1: f1_score(precision, recall),
        precision,
        recall,
        avg_ioa: (!ioas.is_empty()).then(|| mean(&ioas)),
        avg_confidence: (!confidences.is_empty()).then(|| mean(confidences)),
        r2,
        ape_mean: stats.map(|s| s[0]),
        ape_std: stats.map(|s| s[1]),
        ape_median: stats.map(|s| s[2]),
        n_predictions,
        n_ground_truths,
        n_matched: matched.len(),
        n_regression: known.len(),
        distance_bins: distance_binned_errors(
            &records,
            config.bin_width_m,
            config.distance_range_m,
        )?,
    })
}

/// A scored prediction with its own mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub bitmask: Bitmask,
    pub confidence: f64,
    pub pred_area_cm2: f64,
    pub distance_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub bitmask: Bitmask,
    /// Negative when unknown.
    pub gt_area_cm2: f64,
    pub distance_m: Option<f64>,
}

/// Matches predictions to ground truth image by image and summarizes.
/// Predictions below the confidence cutoff are dropped first. The distance
/// of a pair is the ground truth's when known, else the prediction's.
pub fn evaluate_instances(
    images: &[(Vec<PredictedInstance>, Vec<GroundTruthInstance>)],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let mut matched = Vec::new();
    let mut confidences = Vec::new();
    let (mut n_pred, mut n_gt) = (0, 0);
    for (preds, gts) in images {
        let kept: Vec<&PredictedInstance> = preds
            .iter()
            .filter(|p| p.confidence >= config.confidence_cutoff)
            .collect();
        let pm: Vec<Bitmask> = kept.iter().map(|p| p.bitmask.clone()).collect();
        let gm: Vec<Bitmask> = gts.iter().map(|g| g.bitmask.clone()).collect();
        let m = match_instances(&pm, &gm, config.ioa_threshold)?;
        n_pred += kept.len();
        n_gt += gts.len();
        confidences.extend(kept.iter().map(|p| p.confidence));
        matched.extend(m.pairs.iter().map(|pair| {
            let (p, g) = (kept[pair.pred], &gts[pair.gt]);
            MatchedEstimate {
                ioa: pair.ioa,
                confidence: p.confidence,
                pred_area_cm2: p.pred_area_cm2,
                gt_area_cm2: g.gt_area_cm2,
                distance_m: g.distance_m.or(p.distance_m),
            }
        }));
    }
    build_report(n_pred, n_gt, &matched, &confidences, config)
}

/// Summarizes result rows keyed by `(image_id, instance_id)`.
///
/// Each row of `ground_truth` is one annotated instance; when it is `None`
/// the predictions' own `gt_area_cm2` column is used. A prediction counts
/// when it has an area and meets the confidence cutoff, and it matches its
/// instance when its IoA meets the threshold.
pub fn evaluate_results(
    predictions: &[ResultRow],
    ground_truth: Option<&[ResultRow]>,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let gt_rows = ground_truth.unwrap_or(predictions);
    let gt_area: BTreeMap<(u64, u64), f64> = gt_rows
        .iter()
        .map(|r| ((r.image_id, r.instance_id), r.gt_area_cm2))
        .collect();
    let mut matched = Vec::new();
    let mut confidences = Vec::new();
    let mut n_pred = 0;
    for r in predictions {
        let Some(area) = r.pred_area_cm2 else {
            continue;
        };
        if r.confidence < config.confidence_cutoff {
            continue;
        }
        n_pred += 1;
        confidences.push(r.confidence);
        let key = (r.image_id, r.instance_id);
        if let Some(&gt) = gt_area.get(&key) {
            if r.ioa >= config.ioa_threshold {
                matched.push(MatchedEstimate {
                    ioa: r.ioa,
                    confidence: r.confidence,
                    pred_area_cm2: area,
                    gt_area_cm2: gt,
                    distance_m: r.distance_m,
                });
            }
        }
    }
    build_report(n_pred, gt_area.len(), &matched, &confidences, config)
}

/// Writes the distance bins as CSV with columns
/// `bin_lo_m,bin_hi_m,count,mean_ape,clamped`.
pub fn write_distance_bins_to(
    bins: &[DistanceBin],
    w: impl std::io::Write,
) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["bin_lo_m", "bin_hi_m", "count", "mean_ape", "clamped"])?;
    for b in bins {
        wr.write_record([
            b.lo_m.to_string(),
            b.hi_m.to_string(),
            b.count.to_string(),
            b.mean_ape.map(|v| v.to_string()).unwrap_or_default(),
            b.clamped.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Fieldwise mean and population standard deviation across fold reports.
///
/// Optional fields average over the folds where they are defined. Counts are
/// averaged as reals and rounded. Distance bins are pooled: counts add up and
/// bin means are count-weighted; the std report leaves them empty.
pub fn aggregate_folds(reports: &[EvalReport]) -> Result<(EvalReport, EvalReport), EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports(reports.len()));
    }
    let stat = |f: &dyn Fn(&EvalReport) -> f64| {
        let v: Vec<f64> = reports.iter().map(f).collect();
        (mean(&v), population_std(&v))
    };
    let opt = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        if v.is_empty() {
            (None, None)
        } else {
            (Some(mean(&v)), Some(population_std(&v)))
        }
    };
    let count = |f: &dyn Fn(&EvalReport) -> usize| {
        let (m, s) = stat(&|r| f(r) as f64);
        (m.round() as usize, s.round() as usize)
    };
    let (f1, f1_s) = stat(&|r| r.f1);
    let (p, p_s) = stat(&|r| r.precision);
    let (rc, rc_s) = stat(&|r| r.recall);
    let (ioa, ioa_s) = opt(&|r| r.avg_ioa);
    let (conf, conf_s) = opt(&|r| r.avg_confidence);
    let (r2, r2_s) = opt(&|r| r.r2);
    let (am, am_s) = opt(&|r| r.ape_mean);
    let (asd, asd_s) = opt(&|r| r.ape_std);
    let (amed, amed_s) = opt(&|r| r.ape_median);
    let (np, np_s) = count(&|r| r.n_predictions);
    let (ng, ng_s) = count(&|r| r.n_ground_truths);
    let (nm, nm_s) = count(&|r| r.n_matched);
    let (nr, nr_s) = count(&|r| r.n_regression);

    let mut bins = reports[0].distance_bins.clone();
    let same_layout = reports.iter().all(|r| {
        r.distance_bins.len() == bins.len()
            && r.distance_bins
                .iter()
                .zip(&bins)
                .all(|(a, b)| a.lo_m == b.lo_m)
    });
    if same_layout {
        for (i, b) in bins.iter_mut().enumerate() {
            let parts: Vec<&DistanceBin> = reports.iter().map(|r| &r.distance_bins[i]).collect();
            b.count = parts.iter().map(|p| p.count).sum();
            b.clamped = parts.iter().map(|p| p.clamped).sum();
            let total: f64 = parts
                .iter()
                .filter_map(|p| p.mean_ape.map(|m| m * p.count as f64))
                .sum();
            b.mean_ape = (b.count > 0).then(|| total / b.count as f64);
        }
    } else {
        bins.clear();
    }

    let avg = EvalReport {
        f1,
        precision: p,
        recall: rc,
        avg_ioa: ioa,
        avg_confidence: conf,
        r2,
        ape_mean: am,
        ape_std: asd,
        ape_median: amed,
        n_predictions: np,
        n_ground_truths: ng,
        n_matched: nm,
        n_regression: nr,
        distance_bins: bins,
    };
    let std = EvalReport {
        f1: f1_s,
        precision: p_s,
        recall: rc_s,
        avg_ioa: ioa_s,
        avg_confidence: conf_s,
        r2: r2_s,
        ape_mean: am_s,
        ape_std: asd_s,
        ape_median: amed_s,
        n_predictions: np_s,
        n_ground_truths: ng_s,
        n_matched: nm_s,
        n_regression: nr_s,
        distance_bins: Vec::new(),
    };
    Ok((avg, std))
}
