use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use leafarea3d_core::area_head::{
    forward, grad_check, load_features_npy, load_mask_png, loss_and_gradients, AreaHeadParams,
    DEFAULT_FD_STEP,
};
use leafarea3d_core::batch::{cross_validate, estimate_dataset, ground_truth_rows};
use leafarea3d_core::dataset::{load_dataset, read_results, write_results};
use leafarea3d_core::depth_filter::{bilateral_filter, median_filter, BilateralParams};
use leafarea3d_core::evaluation::{evaluate_results, write_distance_bins_to, EvalConfig};
use leafarea3d_core::mesh::MeshingBackend;
use leafarea3d_core::pipeline::PipelineConfig;
use leafarea3d_core::raster::DepthRaster;
use leafarea3d_core::synthetic::{write_synthetic_dataset, NoiseSpec, SynthSpec};

#[derive(Parser, Debug)]
#[command(name = "leafarea3d", version)]
#[command(about = "Leaf surface area from RGBD frames: estimate, evaluate, synthesize")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the area of every annotated instance and write a results CSV
    Estimate(EstimateArgs),
    /// Score a results CSV against ground truth
    Eval(EvalArgs),
    /// Render a synthetic dataset with known leaf areas
    Synth(SynthArgs),
    /// Denoise a 16-bit depth PNG
    Filter(FilterArgs),
    /// K-fold evaluation of the estimate over a dataset
    Crossval(CrossvalArgs),
    /// Run the area head on a feature map and mask
    Areahead(AreaheadArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Poisson,
    Heightfield,
}

impl From<Backend> for MeshingBackend {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Poisson => MeshingBackend::Poisson,
            Backend::Heightfield => MeshingBackend::Heightfield,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Noise {
    Default,
    None,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON file with pipeline and evaluation parameters
    #[arg(long)]
    config: Option<PathBuf>,

    /// Meshing backend (overrides the config file)
    #[arg(long, value_enum)]
    backend: Option<Backend>,

    /// Worker threads (default: available cores)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Annotation JSON of the dataset
    #[arg(long)]
    dataset: PathBuf,

    #[command(flatten)]
    run: RunArgs,

    /// Results CSV
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Results CSV from `estimate`
    #[arg(long)]
    pred: PathBuf,

    /// Annotation JSON with the ground truth (default: gt column of the CSV)
    #[arg(long)]
    gt: Option<PathBuf>,

    /// IoA threshold for a match
    #[arg(long)]
    ioa: Option<f64>,

    /// Minimum confidence for a prediction to count
    #[arg(long)]
    confidence: Option<f64>,

    /// JSON file with evaluation parameters
    #[arg(long)]
    config: Option<PathBuf>,

    /// Report JSON; distance bins go next to it as `<stem>_bins.csv`
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of leaves, one per image
    #[arg(long, default_value_t = 30)]
    n: usize,

    /// Distances in meters as `start:stop:step` or a comma list
    #[arg(long, default_value = "0.5:2.5:0.5")]
    distances: String,

    #[arg(long, value_enum, default_value_t = Noise::Default)]
    noise: Noise,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Bilateral parameters `d,sigma_color,sigma_space`
    #[arg(long)]
    bilateral: Option<String>,

    /// Median kernel size (odd)
    #[arg(long)]
    median: Option<usize>,

    /// Input depth PNG
    #[arg(long = "in")]
    input: PathBuf,

    /// Output depth PNG
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CrossvalArgs {
    #[arg(long)]
    dataset: PathBuf,

    #[arg(long, default_value_t = 5)]
    k: usize,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    #[command(flatten)]
    run: RunArgs,

    /// IoA threshold for a match
    #[arg(long)]
    ioa: Option<f64>,

    /// Summary JSON (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AreaheadArgs {
    /// Head parameters as JSON
    #[arg(long)]
    weights: PathBuf,

    /// C×H×W feature map (.npy)
    #[arg(long)]
    features: PathBuf,

    /// Instance mask PNG; intensities map to [0, 1]
    #[arg(long)]
    mask: PathBuf,

    /// Ground-truth area; adds the loss to the output
    #[arg(long)]
    gt: Option<f64>,

    /// Also compare analytic and finite-difference gradients (needs --gt)
    #[arg(long, requires = "gt")]
    grad_check: bool,

    /// Finite-difference step for --grad-check
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    step: f64,
}

/// Config file: pipeline and evaluation parameters at the top level, each
/// falling back to its default.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    pipeline: PipelineConfig,
    #[serde(flatten)]
    eval: EvalConfig,
    workers: Option<usize>,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl RunArgs {
    fn resolve(&self) -> Result<(FileConfig, usize)> {
        let mut cfg = read_config(self.config.as_deref())?;
        if let Some(b) = self.backend {
            cfg.pipeline.meshing.backend = b.into();
        }
        let workers = self
            .workers
            .or(cfg.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        ensure!(workers >= 1, "worker count must be at least 1");
        Ok((cfg, workers))
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    create_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let (cfg, workers) = args.run.resolve()?;
    let ds = load_dataset(&args.dataset)?;
    let rows = estimate_dataset(&ds, &cfg.pipeline, workers)?;
    create_parent(&args.out)?;
    write_results(&rows, &args.out)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} instances, {} estimated, {failed} failed -> {}",
        rows.len(),
        rows.len() - failed,
        args.out.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = read_config(args.config.as_deref())?.eval;
    if let Some(t) = args.ioa {
        cfg.ioa_threshold = t;
    }
    if let Some(c) = args.confidence {
        cfg.confidence_cutoff = c;
    }
    let rows = read_results(&args.pred)?;
    let gt = match &args.gt {
        Some(path) => Some(ground_truth_rows(&load_dataset(path)?)),
        None => None,
    };
    let report = evaluate_results(&rows, gt.as_deref(), &cfg)?;
    write_json(&report, &args.out)?;

    let stem = args
        .out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    let bins_path = args.out.with_file_name(format!("{stem}_bins.csv"));
    let file =
        fs::File::create(&bins_path).with_context(|| format!("writing {}", bins_path.display()))?;
    write_distance_bins_to(&report.distance_bins, file)?;

    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "F1 {:.4}  R2 {}  APE mean {}  median {}  ({} matched)",
        report.f1,
        show(report.r2),
        show(report.ape_mean),
        show(report.ape_median),
        report.n_matched
    );
    Ok(())
}

/// Parses `start:stop:step` (inclusive of stop) or `a,b,c`.
fn parse_distances(text: &str) -> Result<Vec<f64>> {
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .with_context(|| format!("bad distance {s:?}"))
    };
    if let Some((start, rest)) = text.split_once(':') {
        let (stop, step) = rest
            .split_once(':')
            .context("range must be start:stop:step")?;
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        ensure!(step > 0.0 && stop >= start, "empty distance range {text:?}");
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // Rounded to micrometers so 0.1 steps print cleanly.
        return Ok((0..=n)
            .map(|i| ((start + i as f64 * step) * 1e6).round() / 1e6)
            .collect());
    }
    text.split(',').map(num).collect()
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n: args.n,
        distances_m: parse_distances(&args.distances)?,
        noise: match args.noise {
            Noise::Default => NoiseSpec::default(),
            Noise::None => NoiseSpec::none(),
        },
        seed: args.seed,
        ..Default::default()
    };
    let ds = write_synthetic_dataset(&spec, &args.out)?;
    println!(
        "{} leaves at {:?} m -> {}",
        ds.instances.len(),
        spec.distances_m,
        args.out.join("annotations.json").display()
    );
    Ok(())
}

fn parse_bilateral(text: &str) -> Result<BilateralParams> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [d, sc, ss] = parts[..] else {
        bail!("--bilateral expects d,sigma_color,sigma_space, got {text:?}");
    };
    Ok(BilateralParams {
        d: d.parse().with_context(|| format!("bad diameter {d:?}"))?,
        sigma_color: sc
            .parse()
            .with_context(|| format!("bad sigma_color {sc:?}"))?,
        sigma_space: ss
            .parse()
            .with_context(|| format!("bad sigma_space {ss:?}"))?,
    })
}

fn filter(args: FilterArgs) -> Result<()> {
    let mut depth = DepthRaster::load_png(&args.input)?;
    if let Some(spec) = &args.bilateral {
        depth = bilateral_filter(&depth, &parse_bilateral(spec)?)?;
    }
    if let Some(k) = args.median {
        depth = median_filter(&depth, k)?;
    }
    create_parent(&args.out)?;
    depth.save_png(&args.out)?;
    Ok(())
}

fn crossval(args: CrossvalArgs) -> Result<()> {
    let (cfg, workers) = args.run.resolve()?;
    let mut eval = cfg.eval;
    if let Some(t) = args.ioa {
        eval.ioa_threshold = t;
    }
    let ds = load_dataset(&args.dataset)?;
    let report = cross_validate(&ds, args.k, args.seed, &cfg.pipeline, &eval, workers)?;
    match &args.out {
        Some(path) => write_json(&report, path)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct HeadSummary {
    area: f64,
    loss: Option<f64>,
    grad_check_max_rel_error: Option<f64>,
    grad_check_excluded: Option<Vec<String>>,
}

fn areahead(args: AreaheadArgs) -> Result<()> {
    let params = AreaHeadParams::load(&args.weights)?;
    let features = load_features_npy(&args.features)?;
    let mask = load_mask_png(&args.mask)?;
    let out = forward(&features, &mask, &params)?;
    let mut summary = HeadSummary {
        area: out.area,
        loss: None,
        grad_check_max_rel_error: None,
        grad_check_excluded: None,
    };
    if let Some(gt) = args.gt {
        summary.loss = Some(loss_and_gradients(&params, &features, &mask, gt)?.0);
        if args.grad_check {
            let r = grad_check(&params, &features, &mask, gt, args.step)?;
            summary.grad_check_max_rel_error = Some(r.max_rel_error);
            summary.grad_check_excluded = Some(r.excluded);
        }
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Estimate(a) => estimate(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Filter(a) => filter(a),
        Command::Crossval(a) => crossval(a),
        Command::Areahead(a) => areahead(a),
    }
}
