//! Command-line front end: argument parsing, JSON config files with flag
//! overrides, and the subcommand drivers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::{
    load_ppm, make_synthetic_dataset, save_ppm, DatasetManifest, DatasetSpec, Split,
};
use crate::ensemble::{model_ensemble, EnsembleSpec, FnUpscaler};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::models::{load_weights, Model, ModelConfig};
use crate::nas::{
    search, Acquisition, ArchKind, MiniTrainEvaluator, QuadraticBenchmark, SearchConfig,
    SearchSpace,
};
use crate::trainer::{
    bicubic_baseline, evaluate, evaluate_split, load_checkpoint, train, train_from, TrainConfig,
    TrainData,
};

pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

/// Super-resolution toolkit: synthetic data, training, architecture search,
/// ensembled inference and evaluation.
///
/// Exit codes: 0 success, 1 numerical failure, 2 invalid arguments or config,
/// 3 I/O or file-format failure, 4 training aborted on a non-finite loss.
#[derive(Debug, Parser)]
#[command(name = "srforge", version)]
pub struct Cli {
    /// Worker threads for parallel stages; results do not depend on it.
    #[arg(long, global = true, env = "SRFORGE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a degraded LR/HR dataset with an NCC-gated manifest.
    MakeData(MakeDataArgs),
    /// Train a model on a manifest, writing checkpoints and a JSON report.
    Train(TrainArgs),
    /// Gaussian-process architecture search.
    Search(SearchArgs),
    /// Super-resolve one PPM image with one or more models.
    Infer(InferArgs),
    /// Report PSNR/SSIM on a manifest split, with a bicubic reference row.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// JSON file with dataset fields (count, hr_size, scale, blur_sigma,
    /// noise_sigma, val_count, ncc_threshold, seed); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for hr/, lr/, manifest.jsonl and rejected.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Upscaling factor, one of 2, 3, 4 [default: 2].
    #[arg(long)]
    pub scale: Option<usize>,
    /// Number of pairs that pass the NCC gate [default: 72].
    #[arg(long)]
    pub count: Option<usize>,
    /// HR image side in pixels [default: 96].
    #[arg(long)]
    pub hr_size: Option<usize>,
    /// Gaussian blur sigma in HR pixels [default: 0.8].
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    /// Additive Gaussian noise sigma on the LR image [default: 0.005].
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Pairs held out for validation [default: 1/6 of count].
    #[arg(long)]
    pub val_count: Option<usize>,
    /// Minimum LR/HR normalized cross-correlation [default: 0.99].
    #[arg(long)]
    pub ncc_threshold: Option<f64>,
    /// Root seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// LR tile size for patch-ensemble; 0 processes whole images [default: 120].
    #[arg(long)]
    pub patch: Option<usize>,
    /// Tile stride in LR pixels [default: 60].
    #[arg(long)]
    pub stride: Option<usize>,
    /// Disable the x8 dihedral self-ensemble.
    #[arg(long)]
    pub no_self_ensemble: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON file with keys `preset`, `model` (architecture config) and
    /// `train` (training config); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (manifest.jsonl).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and report.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Named architecture: drn-tiny, drn-star, rcan-tiny, rcan-star, rcan
    /// [default: drn-tiny].
    #[arg(long)]
    pub preset: Option<String>,
    /// Continue from a checkpoint's .srfw file (its .sros sibling is read too).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Crops per optimizer step [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// LR crop side in pixels [default: 120].
    #[arg(long)]
    pub crop: Option<usize>,
    /// MS-SSIM weight in the mixed loss [default: 0.84].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Seed for initialization, crops and augmentation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save a resumable checkpoint every N epochs; 0 saves only the last.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// LR tile size used for validation; 0 for whole images [default: 120].
    #[arg(long)]
    pub patch: Option<usize>,
    /// Tile stride used for validation [default: 60].
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Closed-form quadratic benchmark.
    Synthetic,
    /// Short training runs scored by validation PSNR.
    MiniTrain,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum AcquisitionArg {
    Ucb,
    MaxVariance,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// JSON file with keys `mode`, `space`, `scale`, `search` and `train`;
    /// flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluator [default: synthetic].
    #[arg(long, value_enum)]
    pub mode: Option<SearchMode>,
    /// Architecture family to search: drn or rcan [default: drn].
    #[arg(long)]
    pub space: Option<String>,
    /// Maximum number of evaluations [default: 20].
    #[arg(long)]
    pub budget: Option<usize>,
    /// Quasi-random initial evaluations [default: min(5, budget)].
    #[arg(long)]
    pub init: Option<usize>,
    /// Acquisition rule [default: ucb].
    #[arg(long, value_enum)]
    pub acquisition: Option<AcquisitionArg>,
    /// UCB exploration weight [default: 2].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Manifest for the mini-train evaluator.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Epochs per mini-train evaluation [default: 2].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Write the JSON search report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Weight files (repeat for a model ensemble; all must share the scale).
    #[arg(long = "weights", required = true)]
    pub weights: Vec<PathBuf>,
    /// Input LR image (binary PPM).
    #[arg(long)]
    pub input: PathBuf,
    /// Output SR image (binary PPM).
    #[arg(long)]
    pub output: PathBuf,
    /// JSON file with ensemble keys (patch, stride, self_ensemble, weights).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split to evaluate: train or val [default: val].
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Weight files forming the evaluated ensemble; omit to report only the
    /// reference rows.
    #[arg(long = "weights")]
    pub weights: Vec<PathBuf>,
    /// Add a row scoring each HR target against itself.
    #[arg(long)]
    pub identity: bool,
    /// Skip the bicubic reference row.
    #[arg(long)]
    pub no_baseline: bool,
    /// Write the table as JSON to this file.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// JSON file with ensemble keys (patch, stride, self_ensemble, weights).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::Degenerate(_) | Error::Json(_) => EXIT_INVALID,
        Error::Io { .. } | Error::Weights(_) | Error::Ppm(_) => EXIT_IO,
        Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        Error::Numerical(_) => 1,
    }
}

fn read_config(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::invalid(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    }
    Ok(v)
}

/// Recursively overlay `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Set `path` in `v` when `value` is present.
fn set<T: Serialize>(v: &mut Value, path: &[&str], value: Option<T>) {
    let Some(value) = value else { return };
    let mut cur = v;
    for key in &path[..path.len() - 1] {
        let obj = cur.as_object_mut().expect("config root is an object");
        cur = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .expect("config section is an object")
        .insert(
            path[path.len() - 1].to_string(),
            serde_json::to_value(value).expect("flag serializes"),
        );
}

fn parse<T: DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::invalid(format!("{what} config: {e}")))
}

fn layered<T: Serialize>(defaults: &T, file: Option<&Path>) -> Result<Value> {
    let mut v = serde_json::to_value(defaults).expect("defaults serialize");
    merge(&mut v, read_config(file)?);
    Ok(v)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensemble_spec(file: Option<&Path>, args: &EnsembleArgs) -> Result<EnsembleSpec> {
    let mut v = layered(&EnsembleSpec::default(), file)?;
    set(&mut v, &["patch"], args.patch);
    set(&mut v, &["stride"], args.stride);
    if args.no_self_ensemble {
        set(&mut v, &["self_ensemble"], Some(false));
    }
    parse(v, "ensemble")
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model<f32>>> {
    paths.iter().map(load_weights).collect()
}

/// Run a parsed command line; output goes to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::MakeData(a) => make_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Search(a) => search_cmd(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Eval(a) => eval(a, out),
    }
}

fn say(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}

fn make_data(a: MakeDataArgs, out: &mut dyn Write) -> Result<()> {
    let defaults = DatasetSpec {
        count: 72,
        hr_size: 96,
        scale: 2,
        blur_sigma: 0.8,
        noise_sigma: 0.005,
        val_count: None,
        ncc_threshold: crate::data::NCC_THRESHOLD,
        seed: 0,
    };
    let mut v = layered(&defaults, a.config.as_deref())?;
    set(&mut v, &["scale"], a.scale);
    set(&mut v, &["count"], a.count);
    set(&mut v, &["hr_size"], a.hr_size);
    set(&mut v, &["blur_sigma"], a.blur_sigma);
    set(&mut v, &["noise_sigma"], a.noise_sigma);
    set(&mut v, &["val_count"], a.val_count);
    set(&mut v, &["ncc_threshold"], a.ncc_threshold);
    set(&mut v, &["seed"], a.seed);
    let spec: DatasetSpec = parse(v, "dataset")?;
    spec.validate()?;
    let manifest = make_synthetic_dataset(&a.out, &spec)?;
    let (train, val) = manifest.counts();
    say(
        out,
        format!(
            "wrote {} pairs ({train} train, {val} val) to {}",
            train + val,
            a.out.display()
        ),
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    model: Option<ModelConfig>,
    train: TrainConfig,
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let defaults = TrainFile {
        preset: None,
        model: None,
        train: TrainConfig::new(30),
    };
    let mut v = layered(&defaults, a.config.as_deref())?;
    set(&mut v, &["preset"], a.preset.clone());
    set(&mut v, &["train", "epochs"], a.epochs);
    set(&mut v, &["train", "batch_size"], a.batch_size);
    set(&mut v, &["train", "adam", "lr"], a.lr);
    set(&mut v, &["train", "crop"], a.crop);
    set(&mut v, &["train", "alpha"], a.alpha);
    set(&mut v, &["train", "seed"], a.seed);
    set(&mut v, &["train", "checkpoint_every"], a.checkpoint_every);
    set(&mut v, &["train", "validation", "patch"], a.patch);
    set(&mut v, &["train", "validation", "stride"], a.stride);
    let file: TrainFile = parse(v, "train")?;
    file.train.validate()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let scale = manifest
        .records
        .first()
        .map(|r| r.scale)
        .ok_or_else(|| Error::invalid(format!("manifest {} is empty", a.manifest.display())))?;
    let data = TrainData::from_manifest(&manifest)?;
    let report = if let Some(ckpt) = &a.resume {
        let (mut model, state) = load_checkpoint(ckpt)?;
        train_from(&mut model, state, &data, &file.train, Some(&a.out))?
    } else {
        let config = match (&file.model, a.preset.as_deref().or(file.preset.as_deref())) {
            (Some(m), None) => m.clone(),
            (_, Some(p)) => ModelConfig::preset(p, scale)?,
            (None, None) => ModelConfig::preset("drn-tiny", scale)?,
        };
        if config.scale() != scale {
            return Err(Error::invalid(format!(
                "model is x{}, manifest is x{scale}",
                config.scale()
            )));
        }
        let mut model = Model::build(&config, file.train.seed)?;
        train(&mut model, &data, &file.train, Some(&a.out))?
    };
    write_json(&a.out.join("report.json"), &report)?;
    if let Some(last) = report.epochs.last() {
        let val = last
            .val_psnr
            .map_or("n/a".to_string(), |p| format!("{p:.3} dB"));
        say(
            out,
            format!(
                "epoch {}: loss {:.5}, val PSNR {val}",
                last.epoch + 1,
                last.train_loss
            ),
        );
    }
    if let (Some(e), Some(p)) = (report.best_epoch, report.best_val_psnr) {
        say(out, format!("best val PSNR {p:.3} dB at epoch {}", e + 1));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchFile {
    mode: SearchMode,
    space: ArchKind,
    scale: usize,
    search: SearchConfig,
    train: TrainConfig,
}

fn search_cmd(a: SearchArgs, out: &mut dyn Write) -> Result<()> {
    let mut mini = TrainConfig::new(2);
    mini.crop = 32;
    mini.batch_size = 4;
    mini.adam.lr = 1e-3;
    mini.validation.self_ensemble = false;
    let defaults = SearchFile {
        mode: SearchMode::Synthetic,
        space: ArchKind::Drn,
        scale: 2,
        search: SearchConfig {
            budget: 20,
            init_samples: 5,
            acquisition: Acquisition::default(),
            seed: 0,
        },
        train: mini,
    };
    let mut v = layered(&defaults, a.config.as_deref())?;
    set(&mut v, &["mode"], a.mode);
    set(&mut v, &["space"], a.space.clone());
    set(&mut v, &["search", "budget"], a.budget);
    let init = a.init.or_else(|| a.budget.map(|b| b.min(5)));
    set(&mut v, &["search", "init_samples"], init);
    set(&mut v, &["search", "seed"], a.seed);
    set(&mut v, &["train", "epochs"], a.epochs);
    match (a.acquisition, a.beta) {
        (Some(AcquisitionArg::MaxVariance), _) => set(
            &mut v,
            &["search", "acquisition"],
            Some(Acquisition::MaxVariance),
        ),
        (Some(AcquisitionArg::Ucb), beta) => set(
            &mut v,
            &["search", "acquisition"],
            Some(Acquisition::Ucb {
                beta: beta.unwrap_or(crate::nas::DEFAULT_BETA),
            }),
        ),
        (None, Some(beta)) => set(
            &mut v,
            &["search", "acquisition"],
            Some(Acquisition::Ucb { beta }),
        ),
        (None, None) => {}
    }
    let file: SearchFile = parse(v, "search")?;
    file.search.validate()?;
    let space = match file.space {
        ArchKind::Drn => SearchSpace::drn_default(),
        ArchKind::Rcan => SearchSpace::rcan_default(),
    };
    let report = match file.mode {
        SearchMode::Synthetic => {
            let mut bench = match file.space {
                ArchKind::Drn => QuadraticBenchmark::drn_default(&space),
                ArchKind::Rcan => {
                    QuadraticBenchmark::new(&space, vec![1, 2, 2], vec![1.0, 2.0, 1.5])?
                }
            };
            search(&space, &mut bench, &file.search)?
        }
        SearchMode::MiniTrain => {
            let path = a
                .manifest
                .as_ref()
                .ok_or_else(|| Error::invalid("mini-train mode needs --manifest"))?;
            let manifest = DatasetManifest::load(path)?;
            file.train.validate()?;
            let mut ev = MiniTrainEvaluator::new(
                TrainData::from_manifest(&manifest)?,
                file.train.clone(),
                file.scale,
            );
            search(&space, &mut ev, &file.search)?
        }
    };
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    let best = &report.best_observed;
    say(
        out,
        format!(
            "evaluated {} points with {}",
            report.iterations.len(),
            report.evaluator
        ),
    );
    say(
        out,
        format!(
            "best observed {:?}: {:.6}",
            space.values(&best.point),
            best.score
        ),
    );
    if let Some(p) = &report.posterior_argmax {
        say(
            out,
            format!(
                "posterior argmax {:?}: mean {:.6}",
                space.values(&p.point),
                p.mean
            ),
        );
    }
    Ok(())
}

fn infer(a: InferArgs, out: &mut dyn Write) -> Result<()> {
    let spec = ensemble_spec(a.config.as_deref(), &a.ensemble)?;
    let models = load_models(&a.weights)?;
    let lr = load_ppm::<f32>(&a.input)?;
    let sr = model_ensemble(&models, &spec, &lr)?;
    save_ppm(&sr, &a.output)?;
    let (s, o) = (lr.shape(), sr.shape());
    say(
        out,
        format!(
            "{}x{} -> {}x{} with {} model(s)",
            s.w,
            s.h,
            o.w,
            o.h,
            models.len()
        ),
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    name: String,
    #[serde(flatten)]
    report: MetricReport,
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        other => {
            return Err(Error::invalid(format!(
                "split {other:?} is not train or val"
            )))
        }
    };
    let spec = ensemble_spec(a.config.as_deref(), &a.ensemble)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let models = load_models(&a.weights)?;
    let mut rows = Vec::new();
    if !models.is_empty() {
        let name = if models.len() == 1 {
            "model".to_string()
        } else {
            format!("ensemble({})", models.len())
        };
        rows.push(EvalRow {
            name,
            report: evaluate_split(&models, &manifest, split, &spec),
        });
    }
    if !a.no_baseline || a.identity {
        let pairs = manifest.load_split(split)?;
        let scale = pairs.first().map_or(2, |p| p.scale());
        if !a.no_baseline {
            rows.push(EvalRow {
                name: "bicubic".into(),
                report: bicubic_baseline(&pairs, scale),
            });
        }
        if a.identity {
            let targets: Vec<_> = pairs
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    q.lr = p.hr.clone();
                    q
                })
                .collect();
            let id = FnUpscaler {
                scale: 1,
                f: |x: &crate::tensor::Tensor<f32>| Ok(x.clone()),
            };
            rows.push(EvalRow {
                name: "identity".into(),
                report: evaluate(&[id], &targets, &EnsembleSpec::plain()),
            });
        }
    }
    say(
        out,
        format!(
            "{:<14} {:>6} {:>10} {:>8} {:>8}",
            "name", "count", "psnr_db", "ssim", "failed"
        ),
    );
    for r in &rows {
        say(
            out,
            format!(
                "{:<14} {:>6} {:>10.3} {:>8.4} {:>8}",
                r.name,
                r.report.images.len(),
                r.report.mean_psnr,
                r.report.mean_ssim,
                r.report.failures.len()
            ),
        );
    }
    if let Some(path) = &a.json {
        write_json(path, &json!({ "split": a.split, "rows": rows }))?;
    }
    Ok(())
}
