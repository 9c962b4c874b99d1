use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(f: impl FnOnce(Python<'_>, &Bound<'_, PyModule>) -> PyResult<()>) {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(leafarea3d::leafarea3d)(py);
        f(py, m.bind(py).cast::<PyModule>().unwrap()).unwrap();
    });
}

#[test]
fn filters_round_trip_nested_lists() {
    with_module(|_, m| {
        let mut rows = vec![vec![500.0f32; 7]; 7];
        rows[3][3] = 0.0;
        let out: Vec<Vec<f32>> = m
            .getattr("median_filter")?
            .call1((rows.clone(), 5))?
            .extract()?;
        assert!(out.iter().flatten().all(|&v| v == 500.0));
        let out: Vec<Vec<f32>> = m.getattr("bilateral_filter")?.call1((rows,))?.extract()?;
        assert_eq!(out[3][3], 0.0);
        assert!(m
            .getattr("median_filter")?
            .call1((vec![vec![1.0f32]], 4))
            .is_err());
        Ok(())
    });
}

#[test]
fn metrics_and_geometry() {
    with_module(|_, m| {
        let a = vec![vec![true, true], vec![false, false]];
        let b = vec![vec![true, false], vec![false, false]];
        let ioa: f64 = m
            .getattr("intersection_over_area")?
            .call1((b.clone(), a.clone()))?
            .extract()?;
        assert_eq!(ioa, 0.5);
        let r = m
            .getattr("match_instances")?
            .call1((vec![a.clone()], vec![a, b]))?;
        let f1: f64 = r.get_item("f1")?.extract()?;
        assert_eq!(f1, 2.0 / 3.0);
        let r = m
            .getattr("regression_metrics")?
            .call1((vec![90.0, 210.0, 330.0], vec![100.0, 200.0, 300.0]))?;
        let r2: f64 = r.get_item("r2")?.extract()?;
        assert!((r2 - 0.945).abs() < 1e-12);

        let area: f64 = m
            .getattr("surface_area")?
            .call1((
                vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                vec![[0usize, 1, 2]],
            ))?
            .extract()?;
        assert_eq!(area, 0.5);
        let labels: Vec<Option<usize>> = m
            .getattr("dbscan_labels")?
            .call1((
                vec![[0.0, 0.0, 0.0], [0.001, 0.0, 0.0], [1.0, 1.0, 1.0]],
                0.01,
                2,
            ))?
            .extract()?;
        assert_eq!(labels, vec![Some(0), Some(0), None]);
        Ok(())
    });
}

#[test]
fn area_head_identity_and_gradients() {
    with_module(|_, m| {
        let head = m.getattr("AreaHead")?.call_method1("identity", (2,))?;
        let features = vec![vec![vec![2.0; 3]; 2]];
        let mask = vec![vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        let (area, map): (f64, Vec<Vec<f64>>) = head
            .call_method1("forward", (features.clone(), mask.clone()))?
            .extract()?;
        assert_eq!(area, 8.0);
        assert_eq!(map[0], vec![2.0, 0.0, 2.0]);
        let (loss, grads): (f64, Bound<'_, PyDict>) = head
            .call_method1("loss_and_gradients", (features.clone(), mask.clone(), 5.0))?
            .extract()?;
        assert_eq!(loss, 3.0);
        assert!(grads.contains("pred_weight")?);
        let report = head.call_method1("grad_check", (features, mask, 5.0))?;
        let err: f64 = report.get_item("max_rel_error")?.extract()?;
        assert!(err < 1e-6);

        let json: String = head.call_method0("to_json")?.extract()?;
        let again = m.getattr("AreaHead")?.call_method1("from_json", (json,))?;
        assert_eq!(again.getattr("n_layers")?.extract::<usize>()?, 2);
        let bad = m.getattr("AreaHead")?.call_method1("identity", (1, "tanh"));
        assert!(bad.is_err());
        Ok(())
    });
}

#[test]
fn synthetic_leaf_through_the_pipeline() {
    with_module(|_, m| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let n: usize = m
            .getattr("synthesize")?
            .call1((out, 2, vec![0.5], false, 1))?
            .extract()?;
        assert_eq!(n, 2);
        let ann = dir.path().join("annotations.json");
        let csv = dir.path().join("results.csv");
        let kwargs = PyDict::new(m.py());
        kwargs.set_item("config", r#"{"meshing": {"backend": "heightfield"}}"#)?;
        kwargs.set_item("out_csv", csv.to_str().unwrap())?;
        let rows = m
            .getattr("estimate_dataset")?
            .call((ann.to_str().unwrap(),), Some(&kwargs))?;
        assert_eq!(rows.len()?, 2);
        let pred: f64 = rows.get_item(0)?.get_item("pred_area_cm2")?.extract()?;
        assert!(pred > 0.0);
        let report = m
            .getattr("evaluate_results")?
            .call1((csv.to_str().unwrap(), ann.to_str().unwrap()))?;
        assert_eq!(report.get_item("f1")?.extract::<f64>()?, 1.0);
        Ok(())
    });
}
