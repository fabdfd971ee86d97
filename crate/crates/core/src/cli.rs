//! The `pmvl` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::baselines::{concat_classify, impute_baseline, ClassifierRule, ImputerKind, SoftImputeConfig};
use crate::checkpoint::{load_supervised, save_adversarial, save_supervised};
use crate::data::{
    apply_missing_pattern, load_bundle, load_handwritten, measured_rate, normalize, save_bundle, split,
    synth_dataset_with, MissingSpec, MultiViewDataset, SynthSpec,
};
use crate::error::{Error, Result};
use crate::gan::{cluster_latents, impute, train_unsupervised, GanConfig};
use crate::metrics::{mean_std, nrmse};
use crate::supervised::{evaluate, retune, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "pmvl", version, about = "Partial multi-view representation learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled dataset bundle.
    Synth(SynthArgs),
    /// Remove view entries at random to reach a missing rate.
    Mask(MaskArgs),
    /// Train, re-tune and evaluate the supervised model.
    TrainSup(TrainSupArgs),
    /// Train the unsupervised model, impute and cluster.
    TrainUnsup(TrainUnsupArgs),
    /// Fill missing views with a chosen method.
    Impute(ImputeArgs),
    /// Evaluate a saved supervised model on a labelled bundle.
    Eval(EvalArgs),
    /// Run methods over a grid of missing rates and write long-format CSV.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Dimension of the generating latent space (not the model's).
    #[arg(long, default_value_t = 8)]
    pub source_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "20,20,20")]
    pub view_dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Bundle manifest or directory, or a directory of `mfeat-*` files.
    /// Without it the default synthetic dataset is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed of the default synthetic dataset.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Min-max scale each feature using observed rows.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub eta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Synthetic,
    Handwritten,
    Cub,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Missing rate applied to the (complete) input.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// JSON file with configuration fields; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSupArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum, default_value_t = Preset::Synthetic)]
    pub preset: Preset,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Skip re-tuning and infer test latents with the training networks.
    #[arg(long)]
    pub no_retune: bool,
}

#[derive(Debug, Args)]
pub struct TrainUnsupArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Drop the adversarial term.
    #[arg(long)]
    pub no_gan: bool,
    /// Complete bundle to score imputations against when the input is
    /// already masked.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Number of k-means clusters; defaults to the class count.
    #[arg(long)]
    pub clusters: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImputeMethod {
    CpmGan,
    Cpm,
    GlobalMean,
    ClassMean,
    SoftImpute,
}

impl ImputeMethod {
    fn name(self) -> &'static str {
        match self {
            ImputeMethod::CpmGan => "cpm-gan",
            ImputeMethod::Cpm => "cpm",
            ImputeMethod::GlobalMean => "global-mean",
            ImputeMethod::ClassMean => "class-mean",
            ImputeMethod::SoftImpute => "soft-impute",
        }
    }
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = ImputeMethod::CpmGan)]
    pub method: ImputeMethod,
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train-sup`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepTask {
    Classify,
    Impute,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = SweepTask::Classify)]
    pub task: SweepTask,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    pub rates: Vec<f64>,
    /// classify: cpm, cpm-no-retune, mean-nc, mean-knn;
    /// impute: cpm-gan, cpm, global-mean, class-mean, soft-impute.
    #[arg(long = "method", value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Output CSV; failures go to a `.failures.csv` file next to it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and maps errors to exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Ingest { .. } | Error::Dataset(_) | Error::Input(_) | Error::Split(_) | Error::Dimension { .. } => 3,
        Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 4,
        Error::TrainingState(_) | Error::Diverged { .. } => 5,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("PMVL_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Config(format!("PMVL_THREADS must be a positive integer, got {value:?}")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Mask(a) => cmd_mask(&a),
        Command::TrainSup(a) => cmd_train_sup(&a),
        Command::TrainUnsup(a) => cmd_train_unsup(&a),
        Command::Impute(a) => cmd_impute(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn default_synth(seed: u64) -> SynthSpec {
    SynthSpec::new(300, 3, 8, &[20, 20, 20], seed)
}

fn load_data(args: &DataArgs) -> Result<MultiViewDataset> {
    let data = match &args.data {
        None => synth_dataset_with(&default_synth(args.data_seed))?,
        Some(path) if path.is_dir() && path.join("mfeat-pix").exists() => load_handwritten(path)?,
        Some(path) => load_bundle(path)?,
    };
    Ok(if args.normalize { normalize(&data) } else { data })
}

fn write_report<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Overlays the JSON object in `file` onto `base`.
fn merge_config<T: Serialize + for<'de> serde::Deserialize<'de>>(base: T, file: Option<&Path>) -> Result<T> {
    let Some(file) = file else {
        return Ok(base);
    };
    let text = fs::read_to_string(file)?;
    let overlay: Value = serde_json::from_str(&text)?;
    let Value::Object(fields) = overlay else {
        return Err(Error::Config(format!("{} must hold a JSON object", file.display())));
    };
    let mut merged = serde_json::to_value(base)?;
    let target = merged.as_object_mut().expect("configs serialize to objects");
    for (k, v) in fields {
        if !target.contains_key(&k) {
            return Err(Error::Config(format!("unknown configuration field {k:?}")));
        }
        target.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats == 0 {
        Err(Error::Config("repeats must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn train_config(
    preset: Preset,
    file: Option<&Path>,
    lambda: Option<f64>,
    latent_dim: Option<usize>,
    epochs: Option<usize>,
) -> Result<TrainConfig> {
    let base = match preset {
        Preset::Synthetic => TrainConfig::default(),
        Preset::Handwritten => TrainConfig::handwritten(),
        Preset::Cub => TrainConfig::cub(),
    };
    let mut config = merge_config(base, file)?;
    if let Some(l) = lambda {
        config.lambda = l;
    }
    if let Some(k) = latent_dim {
        config.latent_dim = k;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    config.validate()?;
    Ok(config)
}

fn gan_config(file: Option<&Path>, latent_dim: Option<usize>, epochs: Option<usize>, no_gan: bool) -> Result<GanConfig> {
    let mut config = merge_config(GanConfig::default(), file)?;
    if let Some(k) = latent_dim {
        config.latent_dim = k;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if no_gan {
        config.adv_weight = 0.0;
    }
    config.validate()?;
    Ok(config)
}

fn mask_at(data: &MultiViewDataset, eta: f64, seed: u64) -> Result<MultiViewDataset> {
    if eta == 0.0 {
        return Ok(data.clone());
    }
    apply_missing_pattern(data, &MissingSpec { target_rate: eta, seed })
}

/// Stratified split, then each side masked at `eta` with its own stream.
fn split_and_mask(
    data: &MultiViewDataset,
    fraction: f64,
    eta: f64,
    seed: u64,
) -> Result<(MultiViewDataset, MultiViewDataset)> {
    let (train_part, test_part) = split(data, fraction, seed)?;
    Ok((
        mask_at(&train_part, eta, seed.wrapping_mul(2).wrapping_add(1))?,
        mask_at(&test_part, eta, seed.wrapping_mul(2).wrapping_add(2))?,
    ))
}

#[derive(Debug, Serialize)]
struct Summary {
    mean: f64,
    std: f64,
}

fn summary(values: &[f64]) -> Summary {
    let (mean, std) = mean_std(values);
    Summary { mean, std }
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec::new(a.n, a.classes, a.source_dim, &a.view_dims, a.seed);
    let data = synth_dataset_with(&spec)?;
    let manifest = save_bundle(&data, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_mask(a: &MaskArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let masked = apply_missing_pattern(&data, &MissingSpec { target_rate: a.eta, seed: a.seed })?;
    let manifest = save_bundle(&masked, &a.out)?;
    write_report(
        &json!({
            "command": "mask",
            "target_rate": a.eta,
            "measured_rate": measured_rate(&masked),
            "seed": a.seed,
        }),
        &a.out.join("mask_report.json"),
    )?;
    println!("{}", manifest.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SupervisedRun {
    seed: u64,
    accuracy: f64,
    per_class_accuracy: Vec<Option<f64>>,
    confusion: Vec<Vec<usize>>,
    used_retuned_nets: bool,
    epochs_run: usize,
    final_objective: f64,
    train_missing_rate: f64,
    test_missing_rate: f64,
}

fn cmd_train_sup(a: &TrainSupArgs) -> Result<()> {
    check_repeats(a.model.repeats)?;
    let base = train_config(a.preset, a.model.config.as_deref(), a.lambda, a.model.latent_dim, a.model.epochs)?;
    let data = load_data(&a.data)?;
    data.require_labels()?;
    let mut runs = Vec::new();
    for r in 0..a.model.repeats {
        let seed = a.model.seed + r as u64;
        let (train_data, test_data) = split_and_mask(&data, a.train_fraction, a.model.eta, seed)?;
        let config = TrainConfig { seed, ..base.clone() };
        let mut model = train(&train_data, &config)?;
        if !a.no_retune {
            model = retune(&model, &train_data)?;
        }
        let eval = evaluate(&model, &test_data)?;
        save_supervised(&model, &a.model.out.join(format!("model{r}")))?;
        runs.push(SupervisedRun {
            seed,
            accuracy: eval.report.accuracy,
            per_class_accuracy: eval.report.per_class_accuracy,
            confusion: eval.report.confusion,
            used_retuned_nets: eval.used_retuned_nets,
            epochs_run: model.trace.objective.len() - 1,
            final_objective: *model.trace.objective.last().expect("initial entry"),
            train_missing_rate: measured_rate(&train_data),
            test_missing_rate: measured_rate(&test_data),
        });
    }
    let accuracies: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let report = json!({
        "command": "train-sup",
        "eta": a.model.eta,
        "retune": !a.no_retune,
        "train_fraction": a.train_fraction,
        "config": base,
        "runs": runs,
        "accuracy": summary(&accuracies),
    });
    write_report(&report, &a.model.out.join("report.json"))?;
    let s = summary(&accuracies);
    println!("accuracy {:.4} +- {:.4} over {} run(s)", s.mean, s.std, runs.len());
    Ok(())
}

/// Masked input plus the complete data to score against, if known.
fn unsup_inputs(
    data: &MultiViewDataset,
    truth: Option<&Path>,
    eta: f64,
    seed: u64,
) -> Result<(MultiViewDataset, Option<MultiViewDataset>)> {
    if let Some(path) = truth {
        let t = load_bundle(path)?;
        if eta > 0.0 {
            return Err(Error::Config("use either --truth or --eta, not both".into()));
        }
        return Ok((data.clone(), Some(t)));
    }
    if eta > 0.0 {
        let masked = mask_at(data, eta, seed)?;
        return Ok((masked, Some(data.clone())));
    }
    let truth = data.is_complete().then(|| data.clone());
    Ok((data.clone(), truth))
}

fn cmd_train_unsup(a: &TrainUnsupArgs) -> Result<()> {
    check_repeats(a.model.repeats)?;
    let base = gan_config(a.model.config.as_deref(), a.model.latent_dim, a.model.epochs, a.no_gan)?;
    let data = load_data(&a.data)?;
    let mut runs = Vec::new();
    for r in 0..a.model.repeats {
        let seed = a.model.seed + r as u64;
        let (input, truth) = unsup_inputs(&data, a.truth.as_deref(), a.model.eta, seed)?;
        let config = GanConfig { seed, ..base.clone() };
        let model = train_unsupervised(&input, &config)?;
        let imputed = impute(&model, &input, truth.as_ref())?;
        let run_dir = a.model.out.join(format!("run{r}"));
        save_adversarial(&model, &run_dir.join("model"))?;
        save_bundle(&imputed.completed, &run_dir.join("imputed"))?;
        let clustering = match (input.labels(), a.clusters.or((input.n_classes() > 0).then(|| input.n_classes()))) {
            (Some(labels), Some(k)) => Some(cluster_latents(&model.latent, labels, k, seed, 10)?),
            _ => None,
        };
        runs.push(json!({
            "seed": seed,
            "missing_rate": measured_rate(&input),
            "nrmse": imputed.nrmse,
            "clustering": clustering.map(|c| json!({"acc": c.acc, "nmi": c.nmi, "inertia": c.inertia})),
            "final_reconstruction": model.trace.reconstruction.last(),
            "final_adversarial": model.trace.discriminator.last(),
        }));
    }
    let collect = |key: &str, sub: &str| -> Vec<f64> {
        runs.iter().filter_map(|r| r[key][sub].as_f64()).collect()
    };
    let report = json!({
        "command": "train-unsup",
        "eta": a.model.eta,
        "adversarial": !a.no_gan,
        "config": base,
        "runs": runs,
        "nrmse": summary(&collect("nrmse", "overall")),
        "cluster_acc": summary(&collect("clustering", "acc")),
        "cluster_nmi": summary(&collect("clustering", "nmi")),
    });
    write_report(&report, &a.model.out.join("report.json"))?;
    println!("wrote {}", a.model.out.join("report.json").display());
    Ok(())
}

/// Completed views and NRMSE (when `truth` is known) for one method.
fn impute_with(
    method: ImputeMethod,
    input: &MultiViewDataset,
    truth: Option<&MultiViewDataset>,
    gan: &GanConfig,
    seed: u64,
) -> Result<(MultiViewDataset, Option<f64>)> {
    match method {
        ImputeMethod::CpmGan | ImputeMethod::Cpm => {
            let config = GanConfig {
                seed,
                adv_weight: if method == ImputeMethod::Cpm { 0.0 } else { gan.adv_weight },
                ..gan.clone()
            };
            let model = train_unsupervised(input, &config)?;
            let out = impute(&model, input, truth)?;
            Ok((out.completed, out.nrmse.and_then(|r| r.overall)))
        }
        _ => {
            let kind = match method {
                ImputeMethod::GlobalMean => ImputerKind::GlobalMean,
                ImputeMethod::ClassMean => ImputerKind::ClassMean,
                _ => ImputerKind::SvdSoftImpute(SoftImputeConfig { seed, ..SoftImputeConfig::default() }),
            };
            let out = impute_baseline(input, &kind)?;
            let score = match truth {
                Some(t) => nrmse(out.views(), t.views(), &out.imputed)?.overall,
                None => None,
            };
            Ok((out.data, score))
        }
    }
}

fn cmd_impute(a: &ImputeArgs) -> Result<()> {
    check_repeats(a.model.repeats)?;
    let gan = gan_config(a.model.config.as_deref(), a.model.latent_dim, a.model.epochs, false)?;
    let data = load_data(&a.data)?;
    let mut runs = Vec::new();
    for r in 0..a.model.repeats {
        let seed = a.model.seed + r as u64;
        let (input, truth) = unsup_inputs(&data, a.truth.as_deref(), a.model.eta, seed)?;
        let (completed, score) = impute_with(a.method, &input, truth.as_ref(), &gan, seed)?;
        save_bundle(&completed, &a.model.out.join(format!("run{r}")))?;
        runs.push(json!({"seed": seed, "missing_rate": measured_rate(&input), "nrmse": score}));
    }
    let scores: Vec<f64> = runs.iter().filter_map(|r| r["nrmse"].as_f64()).collect();
    let report = json!({
        "command": "impute",
        "method": a.method.name(),
        "eta": a.model.eta,
        "runs": runs,
        "nrmse": summary(&scores),
    });
    write_report(&report, &a.model.out.join("report.json"))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_supervised(&a.model)?;
    let data = load_data(&a.data)?;
    let eval = evaluate(&model, &data)?;
    let report = json!({
        "command": "eval",
        "accuracy": eval.report.accuracy,
        "per_class_accuracy": eval.report.per_class_accuracy,
        "confusion": eval.report.confusion,
        "n_samples": eval.report.n_samples,
        "used_retuned_nets": eval.used_retuned_nets,
        "predictions": eval.predictions,
    });
    write_report(&report, &a.out)?;
    println!("accuracy {:.4}", eval.report.accuracy);
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep

const CLASSIFY_METHODS: [&str; 4] = ["cpm", "cpm-no-retune", "mean-nc", "mean-knn"];
const IMPUTE_METHODS: [&str; 5] = ["cpm-gan", "cpm", "global-mean", "class-mean", "soft-impute"];

/// One sweep cell's outcome: `(metric, value)` or an error message.
fn sweep_cell(
    task: SweepTask,
    method: &str,
    data: &MultiViewDataset,
    eta: f64,
    seed: u64,
    sup: &TrainConfig,
    gan: &GanConfig,
    fraction: f64,
) -> Result<(&'static str, f64)> {
    match task {
        SweepTask::Classify => {
            let (train_data, test_data) = split_and_mask(data, fraction, eta, seed)?;
            let accuracy = match method {
                "cpm" | "cpm-no-retune" => {
                    let mut model = train(&train_data, &TrainConfig { seed, ..sup.clone() })?;
                    if method == "cpm" {
                        model = retune(&model, &train_data)?;
                    }
                    evaluate(&model, &test_data)?.report.accuracy
                }
                "mean-nc" | "mean-knn" => {
                    let train_filled = impute_baseline(&train_data, &ImputerKind::ClassMean)?.data;
                    let test_filled = impute_baseline(&test_data, &ImputerKind::GlobalMean)?.data;
                    let rule = if method == "mean-nc" {
                        ClassifierRule::NearestCentroid
                    } else {
                        ClassifierRule::Knn(5.min(train_filled.n_samples()))
                    };
                    concat_classify(&train_filled, &test_filled, rule)?.accuracy
                }
                other => return Err(Error::Config(format!("unknown classify method {other:?}"))),
            };
            Ok(("accuracy", accuracy))
        }
        SweepTask::Impute => {
            if !data.is_complete() {
                return Err(Error::Input("imputation sweeps need complete input data".into()));
            }
            let method = match method {
                "cpm-gan" => ImputeMethod::CpmGan,
                "cpm" => ImputeMethod::Cpm,
                "global-mean" => ImputeMethod::GlobalMean,
                "class-mean" => ImputeMethod::ClassMean,
                "soft-impute" => ImputeMethod::SoftImpute,
                other => return Err(Error::Config(format!("unknown impute method {other:?}"))),
            };
            let input = mask_at(data, eta, seed)?;
            let (_, score) = impute_with(method, &input, Some(data), gan, seed)?;
            Ok(("nrmse", score.unwrap_or(f64::NAN)))
        }
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    check_repeats(a.repeats)?;
    let mut rates = a.rates.clone();
    if rates.iter().any(|r| !r.is_finite()) {
        return Err(Error::Config("rates must be finite".into()));
    }
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let methods: Vec<String> = if a.methods.is_empty() {
        match a.task {
            SweepTask::Classify => CLASSIFY_METHODS.iter().map(|s| s.to_string()).collect(),
            SweepTask::Impute => IMPUTE_METHODS.iter().map(|s| s.to_string()).collect(),
        }
    } else {
        a.methods.clone()
    };
    let known: &[&str] = match a.task {
        SweepTask::Classify => &CLASSIFY_METHODS,
        SweepTask::Impute => &IMPUTE_METHODS,
    };
    if let Some(bad) = methods.iter().find(|m| !known.contains(&m.as_str())) {
        return Err(Error::Config(format!("unknown method {bad:?}; expected one of {known:?}")));
    }
    let sup = train_config(Preset::Synthetic, a.config.as_deref(), a.lambda, a.latent_dim, a.epochs)?;
    let gan = gan_config(a.config.as_deref().filter(|_| false), a.latent_dim, a.epochs, false)?;
    let data = load_data(&a.data)?;

    let cells: Vec<(f64, &str, u64)> = rates
        .iter()
        .flat_map(|&eta| {
            methods
                .iter()
                .flat_map(move |m| (0..a.repeats as u64).map(move |r| (eta, m.as_str(), a.seed + r)))
        })
        .collect();
    let outcomes: Vec<_> = cells
        .par_iter()
        .map(|&(eta, method, seed)| sweep_cell(a.task, method, &data, eta, seed, &sup, &gan, a.train_fraction))
        .collect();

    let mut rows = String::from("method,eta,seed,metric,value\n");
    let mut failures = String::from("method,eta,seed,error\n");
    let mut n_failed = 0;
    for (&(eta, method, seed), outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok((metric, value)) => rows.push_str(&format!("{method},{eta},{seed},{metric},{value}\n")),
            Err(e) => {
                n_failed += 1;
                failures.push_str(&format!("{method},{eta},{seed},{}\n", csv_escape(&e.to_string())));
            }
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, rows)?;
    if n_failed > 0 {
        let path = a.out.with_extension("failures.csv");
        fs::write(&path, failures)?;
        eprintln!("{n_failed} cell(s) failed; see {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_overrides_preset_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"lambda": 10.0, "epochs": 7}"#).unwrap();
        let c = train_config(Preset::Handwritten, Some(&path), None, None, Some(3)).unwrap();
        assert_eq!(c.lambda, 10.0);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.latent_dim, 64);

        fs::write(&path, r#"{"lamda": 1.0}"#).unwrap();
        assert!(matches!(
            train_config(Preset::Synthetic, Some(&path), None, None, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Input("x".into())), 3);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 4);
        assert_eq!(exit_code(&Error::Diverged { epoch: 1, phase: "p".into() }), 5);
    }

    #[test]
    fn unknown_sweep_method_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cli = Cli::try_parse_from([
            "pmvl",
            "sweep",
            "--method",
            "nope",
            "--out",
            dir.path().join("x.csv").to_str().unwrap(),
        ])
        .unwrap();
        assert!(matches!(execute(cli.command), Err(Error::Config(_))));
    }
}
