use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use leafarea3d_core::area_head::{save_features_npy, Activation, AreaHeadParams, FeatureMap};
use leafarea3d_core::dataset::{load_dataset, read_results};
use leafarea3d_core::raster::{Bitmask, DepthRaster};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leafarea3d"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize) {
    ok(&[
        "synth",
        "--n",
        &n.to_string(),
        "--distances",
        "0.5:1.0:0.5",
        "--seed",
        "3",
        "--out",
        s(dir),
    ]);
}

fn estimate(dataset: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "estimate",
        "--dataset",
        s(dataset),
        "--backend",
        "heightfield",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn estimate_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 10);
    let ann = data.join("annotations.json");
    let csv = dir.path().join("out/results.csv");
    estimate(&ann, &csv, &["--workers", "2"]);
    let rows = read_results(&csv).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows
        .iter()
        .all(|r| r.pred_area_cm2.unwrap() > 0.0 && r.error.is_none()));

    let report = dir.path().join("report.json");
    ok(&[
        "eval",
        "--pred",
        s(&csv),
        "--gt",
        s(&ann),
        "--ioa",
        "0.9",
        "--out",
        s(&report),
    ]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["f1"], 1.0);
    assert_eq!(v["n_matched"], 10);
    assert!(v["ape_median"].as_f64().unwrap() < 10.0);
    let bins = fs::read_to_string(dir.path().join("report_bins.csv")).unwrap();
    assert!(bins.starts_with("bin_lo_m,bin_hi_m,count,mean_ape,clamped\n"));
    assert_eq!(bins.lines().count(), 5);
}

#[test]
fn per_instance_failure_is_a_row_not_an_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 4);
    let ann = dir.path().join("annotations.json");
    let ds = load_dataset(&ann).unwrap();
    let frame = &ds.frames[&ds.image_ids()[2]];
    DepthRaster::new(1280, 720)
        .save_png(&frame.depth_path)
        .unwrap();
    let csv = dir.path().join("results.csv");
    estimate(&ann, &csv, &[]);
    let rows = read_results(&csv).unwrap();
    assert_eq!(rows.iter().filter(|r| r.error.is_some()).count(), 1);
    assert!(rows[2].error.is_some() && rows[2].pred_area_cm2.is_none());
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, 3);
    synth(&b, 3);
    for name in ["annotations.json", "color/00001.png", "depth/00002.png"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let (ca, cb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    estimate(&a.join("annotations.json"), &ca, &["--workers", "1"]);
    estimate(&b.join("annotations.json"), &cb, &["--workers", "3"]);
    assert_eq!(fs::read(&ca).unwrap(), fs::read(&cb).unwrap());
}

#[test]
fn crossval_reports_folds_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 5);
    let ann = dir.path().join("annotations.json");
    let cfg = dir.path().join("config.json");
    fs::write(
        &cfg,
        r#"{"meshing": {"backend": "heightfield"}, "workers": 2}"#,
    )
    .unwrap();
    let fold_ids = |seed: &str| {
        let out = dir.path().join(format!("cv{seed}.json"));
        ok(&[
            "crossval",
            "--dataset",
            s(&ann),
            "--k",
            "5",
            "--seed",
            seed,
            "--config",
            s(&cfg),
            "--out",
            s(&out),
        ]);
        let v: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
        assert_eq!(v["folds"].as_array().unwrap().len(), 5);
        assert_eq!(v["average"]["f1"], 1.0);
        assert_eq!(v["std"]["f1"], 0.0);
        v["folds"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["test_image_ids"].clone())
            .collect::<Vec<_>>()
    };
    assert_ne!(fold_ids("1"), fold_ids("2"));
}

#[test]
fn filter_removes_an_impulse() {
    let dir = tempfile::tempdir().unwrap();
    let mut depth = DepthRaster::filled(9, 9, 500.0);
    depth.set(4, 4, 0.0);
    let (input, out) = (dir.path().join("in.png"), dir.path().join("out.png"));
    depth.save_png(&input).unwrap();
    ok(&[
        "filter",
        "--bilateral",
        "5,150,50",
        "--median",
        "5",
        "--in",
        s(&input),
        "--out",
        s(&out),
    ]);
    let filtered = DepthRaster::load_png(&out).unwrap();
    assert!(filtered.as_slice().iter().all(|&v| v == 500.0));

    let bad = run(&[
        "filter",
        "--median",
        "4",
        "--in",
        s(&input),
        "--out",
        s(&out),
    ]);
    assert!(!bad.status.success());
}

#[test]
fn areahead_sums_the_masked_identity_map() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.json");
    AreaHeadParams::identity(2, Activation::Relu)
        .save(&weights)
        .unwrap();
    let features = dir.path().join("f.npy");
    save_features_npy(&FeatureMap::constant(1, 4, 4, 2.0).unwrap(), &features).unwrap();
    let mask = dir.path().join("m.png");
    Bitmask::from_fn(4, 4, |x, _| x < 2)
        .save_png(&mask)
        .unwrap();

    let out = ok(&[
        "areahead",
        "--weights",
        s(&weights),
        "--features",
        s(&features),
        "--mask",
        s(&mask),
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["area"], 16.0);
    assert!(v["loss"].is_null());

    let out = ok(&[
        "areahead",
        "--weights",
        s(&weights),
        "--features",
        s(&features),
        "--mask",
        s(&mask),
        "--gt",
        "10",
        "--grad-check",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["loss"], 6.0);
    assert!(v["grad_check_max_rel_error"].as_f64().unwrap() < 1e-6);
}

#[test]
fn dataset_level_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&[
        "estimate",
        "--dataset",
        s(&missing),
        "--out",
        s(&dir.path().join("r.csv")),
    ]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn both_backends_share_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let ann = dir.path().join("annotations.json");
    let (hf, ps) = (dir.path().join("hf.csv"), dir.path().join("ps.csv"));
    estimate(&ann, &hf, &[]);
    ok(&[
        "estimate",
        "--dataset",
        s(&ann),
        "--backend",
        "poisson",
        "--out",
        s(&ps),
    ]);
    let header = |p: &Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header(&hf), header(&ps));
    for p in [&hf, &ps] {
        assert!(read_results(p).unwrap()[0].pred_area_cm2.unwrap() > 0.0);
    }
}
