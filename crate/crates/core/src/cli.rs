//! Command-line front end. Every command writes its artifacts and a
//! `manifest.json` into one output directory; `rerun` replays a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codes::PackedCodeDatabase;
use crate::data::{self, Dataset, QuerySplit};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsSummary, Queries};
use crate::models::{load_checkpoint, save_checkpoint, Architecture};
use crate::quantizers::{QuantizerConfig, QuantizerVariant};
use crate::training::{self, TrainConfig, Trained};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "BIHALF_OUT_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bihalf", version, about = "Train, encode and evaluate bi-half binary hash codes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Train an autoencoder with a quantized bottleneck on IDX images.
    TrainAe(TrainAeArgs),
    /// Train a linear hash head on a frozen feature file.
    TrainFeat(TrainFeatArgs),
    /// Encode a dataset into a packed code database.
    Encode(EncodeArgs),
    /// Hamming-ranking evaluation: mAP@k, TopN precision and PR curves.
    Eval(EvalArgs),
    /// Per-bit histograms of continuous features and code statistics.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic Gaussian-cluster feature file.
    GenSynthetic(GenSyntheticArgs),
    /// Re-execute the command recorded in a manifest.
    #[serde(skip)]
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerChoice {
    Bihalf,
    Sign,
    SignReg,
    MedianEma,
    Tanh,
    Relax,
}

impl QuantizerChoice {
    fn variant(self) -> QuantizerVariant {
        match self {
            QuantizerChoice::Bihalf => QuantizerVariant::BiHalf,
            QuantizerChoice::Sign | QuantizerChoice::SignReg => QuantizerVariant::Sign,
            QuantizerChoice::MedianEma => QuantizerVariant::MedianEma,
            QuantizerChoice::Tanh => QuantizerVariant::TanhCont,
            QuantizerChoice::Relax => QuantizerVariant::Relaxation,
        }
    }
}

/// Flags shared by both training commands.
#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainFlags {
    /// Code length K.
    #[arg(long)]
    pub bits: usize,
    #[arg(long, value_enum)]
    pub quantizer: QuantizerChoice,
    /// Balance-regularizer weight; only valid with `sign-reg` (default 0.1 there).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bi-half proxy scale; defaults to 3 / (N K).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Sharpness of the tanh continuation.
    #[arg(long, default_value_t = QuantizerConfig::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = QuantizerConfig::DEFAULT_EMA_DECAY)]
    pub ema_decay: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lr_drop_factor: f64,
    /// Epochs without a new best loss before the learning rate drops.
    #[arg(long, default_value_t = 5)]
    pub plateau_patience: usize,
    /// Learning-rate drops allowed; the next plateau stops training.
    #[arg(long, default_value_t = 2)]
    pub max_lr_drops: usize,
    /// Hold out this many query items per class and train on the rest (0 = train on everything).
    #[arg(long, default_value_t = 0)]
    pub queries_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Output directory (default `$BIHALF_OUT_DIR/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainAeArgs {
    /// Directory holding an IDX image/label pair.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = Architecture::DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TrainFeatArgs {
    /// Feature file (or IDX directory).
    #[arg(long)]
    pub features: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPart {
    All,
    Query,
    Database,
}

/// Dataset selection shared by `encode` and `diagnose`.
#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct DataSelection {
    /// IDX directory or feature file.
    #[arg(long)]
    pub data: PathBuf,
    /// Split file written by a training command.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitPart::All)]
    pub part: SplitPart,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub select: DataSelection,
    /// Rows encoded per forward pass; does not affect the codes.
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Database codes.
    #[arg(long)]
    pub db: PathBuf,
    /// Query codes; without it every database item queries the rest.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub k: usize,
    /// Largest N of the TopN curve (default: min(1000, rankable items)).
    #[arg(long)]
    pub topn_max: Option<usize>,
    /// Number of rows in the TopN CSV.
    #[arg(long, default_value_t = 100)]
    pub topn_points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub select: DataSelection,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenSyntheticArgs {
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write artifacts here instead of the recorded output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    /// The command with every default filled in.
    pub invocation: Command,
    /// Derived settings (training configuration, resolved γ, ...).
    pub resolved: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
}

/// Failure that maps to the usage exit code.
fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of a file, or of every regular file directly inside a directory.
fn digest_input(path: &Path) -> Result<Vec<InputDigest>> {
    let mut files = Vec::new();
    if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        for entry in entries {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    files
        .into_iter()
        .map(|p| {
            Ok(InputDigest {
                sha256: sha256_file(&p)?,
                path: p,
            })
        })
        .collect()
}

fn resolve_out(out: &Option<PathBuf>, command: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("bihalf-out"))
            .join(command)
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    metrics::write_text(path, &text)
}

struct Outcome {
    resolved: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainAe(_) => "train-ae",
            Command::TrainFeat(_) => "train-feat",
            Command::Encode(_) => "encode",
            Command::Eval(_) => "eval",
            Command::Diagnose(_) => "diagnose",
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Rerun(_) => "rerun",
        }
    }

    fn out_slot(&mut self) -> Option<&mut Option<PathBuf>> {
        match self {
            Command::TrainAe(a) => Some(&mut a.train.out),
            Command::TrainFeat(a) => Some(&mut a.train.out),
            Command::Encode(a) => Some(&mut a.out),
            Command::Eval(a) => Some(&mut a.out),
            Command::Diagnose(a) => Some(&mut a.out),
            Command::GenSynthetic(a) => Some(&mut a.out),
            Command::Rerun(_) => None,
        }
    }
}

/// Runs one command, writing its artifacts and manifest.
pub fn run(mut command: Command) -> Result<PathBuf> {
    if let Command::Rerun(args) = command {
        return rerun(&args);
    }
    let name = command.name();
    let requested = command.out_slot().and_then(|s| s.clone());
    let out = resolve_out(&requested, name);
    *command.out_slot().expect("not a rerun") = Some(out.clone());
    let outcome = match &command {
        Command::TrainAe(a) => train_ae(a, &out)?,
        Command::TrainFeat(a) => train_feat(a, &out)?,
        Command::Encode(a) => encode(a, &out)?,
        Command::Eval(a) => eval(a, &out)?,
        Command::Diagnose(a) => diagnose(a, &out)?,
        Command::GenSynthetic(a) => gen_synthetic(a, &out)?,
        Command::Rerun(_) => unreachable!(),
    };
    let mut inputs = Vec::new();
    for p in &outcome.inputs {
        inputs.extend(digest_input(p)?);
    }
    let manifest = RunManifest {
        tool: "bihalf".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        invocation: command,
        resolved: outcome.resolved,
        seed: outcome.seed,
        inputs,
        outputs: outcome.outputs,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(out)
}

fn rerun(args: &RerunArgs) -> Result<PathBuf> {
    let bytes = fs::read(&args.manifest).map_err(|e| Error::io(&args.manifest, e))?;
    let manifest: RunManifest = serde_json::from_slice(&bytes)?;
    for input in &manifest.inputs {
        let actual = sha256_file(&input.path)?;
        if actual != input.sha256 {
            return Err(Error::Mismatch(format!(
                "{} changed since the manifest was written (sha256 {actual}, recorded {})",
                input.path.display(),
                input.sha256
            )));
        }
    }
    let mut command = manifest.invocation;
    let slot = command
        .out_slot()
        .ok_or_else(|| usage("a manifest cannot record a rerun"))?;
    if let Some(out) = &args.out {
        *slot = Some(out.clone());
    }
    run(command)
}

fn load_selection(select: &DataSelection) -> Result<(Dataset, Vec<PathBuf>)> {
    let dataset = data::load_any(&select.data)?;
    let mut inputs = vec![select.data.clone()];
    let dataset = match (&select.split, select.part) {
        (_, SplitPart::All) => dataset,
        (None, _) => return Err(usage("--part query/database needs --split")),
        (Some(path), part) => {
            let split = QuerySplit::load(path)?;
            inputs.push(path.clone());
            let idx = if part == SplitPart::Query { &split.query } else { &split.database };
            if idx.iter().any(|&i| i >= dataset.len()) {
                return Err(Error::Mismatch(format!(
                    "split {} indexes past the {} dataset items",
                    path.display(),
                    dataset.len()
                )));
            }
            dataset.subset(idx)?
        }
    };
    Ok((dataset, inputs))
}

fn train_configs(flags: &TrainFlags) -> Result<(QuantizerConfig, TrainConfig)> {
    let alpha = match (flags.quantizer, flags.alpha) {
        (QuantizerChoice::SignReg, a) => a.unwrap_or(0.1),
        (_, Some(_)) => return Err(usage("--alpha is only valid with --quantizer sign-reg")),
        (_, None) => 0.0,
    };
    if flags.gamma.is_some() && flags.quantizer != QuantizerChoice::Bihalf {
        return Err(usage("--gamma is only valid with --quantizer bihalf"));
    }
    let mut qcfg = QuantizerConfig::new(flags.quantizer.variant());
    qcfg.beta = flags.beta;
    qcfg.ema_decay = flags.ema_decay;
    let cfg = TrainConfig {
        lr: flags.lr,
        momentum: flags.momentum,
        weight_decay: flags.weight_decay,
        batch_size: flags.batch_size,
        epochs: flags.epochs,
        seed: flags.seed,
        gamma_override: flags.gamma,
        alpha,
        lr_drop_factor: flags.lr_drop_factor,
        plateau_patience: flags.plateau_patience,
        max_lr_drops: flags.max_lr_drops,
    };
    qcfg.validate()?;
    cfg.validate(qcfg.variant)?;
    Ok((qcfg, cfg))
}

/// Common tail of both training commands.
fn run_training(
    dataset: Dataset,
    input: &Path,
    flags: &TrainFlags,
    out: &Path,
    train: impl FnOnce(&Dataset, QuantizerConfig, &TrainConfig) -> Result<Trained>,
) -> Result<Outcome> {
    let (qcfg, cfg) = train_configs(flags)?;
    let mut outputs = Vec::new();
    let train_set = if flags.queries_per_class > 0 {
        let split = QuerySplit::per_class(&dataset.labels, flags.queries_per_class, flags.split_seed)?;
        let path = out.join("split.json");
        split.save(&path)?;
        outputs.push(path);
        dataset.subset(&split.database)?
    } else {
        dataset
    };
    let mut trained = train(&train_set, qcfg, &cfg)?;
    let ckpt_path = out.join("checkpoint.bhn");
    save_checkpoint(&ckpt_path, &trained.checkpoint)?;
    trained.report.checkpoint_path = Some(ckpt_path.clone());
    let report_path = out.join("report.json");
    write_json(&report_path, &trained.report)?;
    if let Some(last) = trained.report.epochs.last() {
        eprintln!(
            "trained {} epochs: loss {:.6}, training-code entropy {:.4}",
            trained.report.epochs.len(),
            last.loss,
            last.mean_entropy
        );
    }
    outputs.push(ckpt_path);
    outputs.push(report_path);
    Ok(Outcome {
        resolved: serde_json::json!({
            "train": cfg,
            "quantizer": trained.checkpoint.quantizer,
            "architecture": trained.checkpoint.model.architecture,
            "n_train": train_set.len(),
        }),
        seed: Some(flags.seed),
        inputs: vec![input.to_path_buf()],
        outputs,
    })
}

fn train_ae(args: &TrainAeArgs, out: &Path) -> Result<Outcome> {
    let dataset = data::load_idx_dir(&args.data)?;
    let arch = Architecture::Autoencoder {
        input_dim: dataset.dim(),
        hidden: args.hidden,
        bits: args.train.bits,
    };
    run_training(dataset, &args.data, &args.train, out, |ds, q, cfg| {
        training::train_autoencoder(ds, &arch, q, cfg)
    })
}

fn train_feat(args: &TrainFeatArgs, out: &Path) -> Result<Outcome> {
    let dataset = data::load_any(&args.features)?;
    let arch = Architecture::LinearHead {
        input_dim: dataset.dim(),
        bits: args.train.bits,
    };
    run_training(dataset, &args.features, &args.train, out, |ds, q, cfg| {
        training::train_feature_head(ds, &arch, q, cfg)
    })
}

fn encode(args: &EncodeArgs, out: &Path) -> Result<Outcome> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let (dataset, mut inputs) = load_selection(&args.select)?;
    let codes = training::encode(&checkpoint, &dataset.items, args.chunk)?;
    let db = PackedCodeDatabase::pack(&codes, dataset.labels)?;
    let path = out.join("codes.bhdb");
    db.save(&path)?;
    inputs.insert(0, args.checkpoint.clone());
    Ok(Outcome {
        resolved: serde_json::json!({ "n_items": db.len(), "n_bits": db.n_bits() }),
        seed: None,
        inputs,
        outputs: vec![path],
    })
}

fn eval(args: &EvalArgs, out: &Path) -> Result<Outcome> {
    let db = PackedCodeDatabase::load(&args.db)?;
    let external = args.queries.as_deref().map(PackedCodeDatabase::load).transpose()?;
    let queries = match &external {
        Some(q) => Queries::External(q),
        None => Queries::AllMembers,
    };
    let rankable = if external.is_some() { db.len() } else { db.len().saturating_sub(1) };
    let topn_max = args.topn_max.unwrap_or(rankable.min(1000));
    if topn_max > rankable {
        return Err(usage(format!("--topn-max {topn_max} exceeds the {rankable} rankable items")));
    }
    let points = metrics::sample_points(topn_max, args.topn_points);
    let curves = metrics::evaluate(queries, &db, args.k, &points)?;
    let stats = metrics::bit_entropy_packed(&db)?;
    let summary = MetricsSummary {
        k: args.k,
        map_at_k: curves.map_at_k,
        mean_entropy: stats.mean_entropy,
        per_bit_rates: stats.positive_rates.clone(),
        n_queries: external.as_ref().map_or(db.len(), |q| q.len()),
        n_database: db.len(),
        n_bits: db.n_bits(),
    };
    let paths = [out.join("metrics.json"), out.join("topn.csv"), out.join("pr.csv")];
    write_json(&paths[0], &summary)?;
    metrics::write_text(&paths[1], &metrics::topn_csv(&curves.topn_precision))?;
    metrics::write_text(&paths[2], &metrics::pr_csv(&curves.pr_curve))?;
    eprintln!("mAP@{} = {:.4}, mean bit entropy {:.4}", args.k, summary.map_at_k, summary.mean_entropy);
    let mut inputs = vec![args.db.clone()];
    inputs.extend(args.queries.clone());
    Ok(Outcome {
        resolved: serde_json::json!({ "topn_max": topn_max, "topn_points": points.len() }),
        seed: None,
        inputs,
        outputs: paths.to_vec(),
    })
}

fn diagnose(args: &DiagnoseArgs, out: &Path) -> Result<Outcome> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let (dataset, mut inputs) = load_selection(&args.select)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let u = training::features(&checkpoint, &dataset.items, 256)?;
    let codes = training::encode(&checkpoint, &dataset.items, 256)?;
    let histograms = metrics::feature_histograms(&u, args.bins)?;
    let stats = metrics::bit_entropy(&codes)?;
    let paths = [out.join("histograms.csv"), out.join("bitstats.json")];
    metrics::write_text(&paths[0], &metrics::histogram_csv(&histograms))?;
    write_json(&paths[1], &stats)?;
    eprintln!("mean bit entropy {:.4}", stats.mean_entropy);
    inputs.insert(0, args.checkpoint.clone());
    Ok(Outcome {
        resolved: serde_json::json!({ "n_items": dataset.len() }),
        seed: None,
        inputs,
        outputs: paths.to_vec(),
    })
}

fn gen_synthetic(args: &GenSyntheticArgs, out: &Path) -> Result<Outcome> {
    let dataset = data::synthetic_clusters(args.n_per_class, args.classes, args.dim, args.spread, args.seed)?;
    let path = out.join("features.bhft");
    data::write_features(&path, &dataset)?;
    Ok(Outcome {
        resolved: serde_json::json!({ "n_items": dataset.len() }),
        seed: Some(args.seed),
        inputs: Vec::new(),
        outputs: vec![path],
    })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(out) => {
            eprintln!("wrote {}", out.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
