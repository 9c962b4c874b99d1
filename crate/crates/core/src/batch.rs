//! Dataset-level runs: per-instance area estimates on a worker pool and
//! k-fold evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{kfold_split, Dataset, DatasetError, ResultRow};
use crate::evaluation::{
    aggregate_folds, evaluate_results, instance_distance, EvalConfig, EvalError, EvalReport,
};
use crate::pipeline::{estimate_leaf_area_ip, PipelineConfig};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Estimates every annotated instance with its ground-truth mask.
///
/// Frames run on a pool of `workers` threads. Rows come back in image then
/// annotation order. Failures are recorded in the row's `error` column and
/// never stop the batch.
pub fn estimate_dataset(
    dataset: &Dataset,
    config: &PipelineConfig,
    workers: usize,
) -> Result<Vec<ResultRow>, BatchError> {
    if workers == 0 {
        return Err(BatchError::NoWorkers);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()?;
    let image_ids = dataset.image_ids();
    let per_image: Vec<Vec<ResultRow>> = pool.install(|| {
        image_ids
            .par_iter()
            .map(|&image_id| estimate_image(dataset, image_id, config))
            .collect()
    });
    Ok(per_image.into_iter().flatten().collect())
}

fn estimate_image(dataset: &Dataset, image_id: u64, config: &PipelineConfig) -> Vec<ResultRow> {
    let instances: Vec<_> = dataset
        .instances
        .iter()
        .filter(|i| i.image_id == image_id)
        .collect();
    let base = |id: u64, gt: f64| ResultRow {
        image_id,
        instance_id: id,
        pred_area_cm2: None,
        gt_area_cm2: gt,
        ioa: 0.0,
        confidence: 0.0,
        distance_m: None,
        error: None,
    };
    let frame = match dataset.frame(image_id).map(|d| d.load()) {
        Some(Ok(f)) => f,
        failure => {
            let msg = match failure {
                Some(Err(e)) => format!("load_frame: {e}"),
                _ => "load_frame: image descriptor missing".to_string(),
            };
            return instances
                .iter()
                .map(|i| ResultRow {
                    error: Some(msg.clone()),
                    ..base(i.id, i.gt_area_cm2)
                })
                .collect();
        }
    };
    instances
        .iter()
        .map(|inst| {
            let mut row = base(inst.id, inst.gt_area_cm2);
            row.distance_m = instance_distance(&frame.depth, frame.depth_scale, &inst.bitmask);
            match estimate_leaf_area_ip(&frame, &inst.bitmask, config) {
                Ok(est) => {
                    row.pred_area_cm2 = Some(est.area_cm2);
                    row.ioa = 1.0;
                    row.confidence = 1.0;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

/// One row per annotated instance carrying only the ground-truth area.
pub fn ground_truth_rows(dataset: &Dataset) -> Vec<ResultRow> {
    dataset
        .instances
        .iter()
        .map(|i| ResultRow {
            image_id: i.image_id,
            instance_id: i.id,
            pred_area_cm2: None,
            gt_area_cm2: i.gt_area_cm2,
            ioa: 0.0,
            confidence: 0.0,
            distance_m: None,
            error: None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_image_ids: Vec<u64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub average: EvalReport,
    pub std: EvalReport,
}

/// Splits the images into `k` folds and evaluates the estimate on each test
/// fold. The estimate has no trained state, so the training part of each
/// split is unused.
pub fn cross_validate(
    dataset: &Dataset,
    k: usize,
    seed: u64,
    config: &PipelineConfig,
    eval: &EvalConfig,
    workers: usize,
) -> Result<CrossValReport, BatchError> {
    let splits = kfold_split(dataset, k, seed)?;
    let rows = estimate_dataset(dataset, config, workers)?;
    let mut folds = Vec::with_capacity(k);
    for (fold, (_, test)) in splits.iter().enumerate() {
        let ids = test.image_ids();
        let fold_rows: Vec<ResultRow> = rows
            .iter()
            .filter(|r| ids.contains(&r.image_id))
            .cloned()
            .collect();
        let gt = ground_truth_rows(test);
        folds.push(FoldReport {
            fold,
            test_image_ids: ids,
            report: evaluate_results(&fold_rows, Some(&gt), eval)?,
        });
    }
    let reports: Vec<EvalReport> = folds.iter().map(|f| f.report.clone()).collect();
    let (average, std) = aggregate_folds(&reports)?;
    Ok(CrossValReport {
        k,
        seed,
        folds,
        average,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::mesh::{MeshingBackend, MeshingConfig};
    use crate::raster::DepthRaster;
    use crate::synthetic::{write_synthetic_dataset, SynthSpec};

    fn small_spec(n: usize) -> SynthSpec {
        SynthSpec {
            n,
            distances_m: vec![0.5],
            area_range_cm2: (30.0, 60.0),
            intrinsics: CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap(),
            ..Default::default()
        }
    }

    fn heightfield() -> PipelineConfig {
        PipelineConfig {
            meshing: MeshingConfig {
                backend: MeshingBackend::Heightfield,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn per_instance_errors_do_not_stop_the_batch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_synthetic_dataset(&small_spec(4), dir.path()).unwrap();
        let blank = &ds.frames[&2].depth_path;
        DepthRaster::new(320, 240).save_png(blank).unwrap();
        let rows = estimate_dataset(&ds, &heightfield(), 2).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.image_id).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert!(rows[1].pred_area_cm2.is_none());
        assert!(rows[1]
            .error
            .as_deref()
            .unwrap()
            .starts_with("backproject_masked"));
        for r in [&rows[0], &rows[2], &rows[3]] {
            assert!(r.pred_area_cm2.unwrap() > 0.0, "{r:?}");
            assert_eq!(r.distance_m.map(|d| (d * 10.0).round()), Some(5.0));
        }
        assert!(matches!(
            estimate_dataset(&ds, &heightfield(), 0),
            Err(BatchError::NoWorkers)
        ));
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_synthetic_dataset(&small_spec(3), dir.path()).unwrap();
        let a = estimate_dataset(&ds, &heightfield(), 1).unwrap();
        let b = estimate_dataset(&ds, &heightfield(), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crossval_structure() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_synthetic_dataset(&small_spec(6), dir.path()).unwrap();
        let cv = cross_validate(&ds, 3, 7, &heightfield(), &EvalConfig::default(), 2).unwrap();
        assert_eq!(cv.folds.len(), 3);
        let mut ids: Vec<u64> = cv
            .folds
            .iter()
            .flat_map(|f| f.test_image_ids.clone())
            .collect();
        ids.sort();
        assert_eq!(ids, ds.image_ids());
        assert_eq!(cv.average.f1, 1.0);
        assert_eq!(cv.std.f1, 0.0);
        assert!(matches!(
            cross_validate(&ds, 7, 7, &heightfield(), &EvalConfig::default(), 2),
            Err(BatchError::Dataset(DatasetError::BadFoldCount { .. }))
        ));
    }
}
