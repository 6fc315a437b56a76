//! The `habitat` command line: ingest, split, train, eval, report, serve.
//!
//! Experiment settings come from flags, then an optional TOML file, then
//! built-in defaults. Every command logs its effective configuration before
//! doing any work and re-reads what it wrote before exiting successfully.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use habitat_core::folds::stratified_kfold_split;
use habitat_core::ClassTaxonomy;
use serde::{Deserialize, Serialize};

use crate::checkpoint::read_checkpoint_meta;
use crate::dataset::{
    ingest_directory, read_folds, read_manifest, write_folds, write_manifest, write_skip_report,
};
use crate::error::{HabitatError, IoContext, Result};
use crate::model::{BackboneKind, WeightSource};
use crate::report::{evaluate_records, read_evaluation, read_prediction_log, render_table, write_evaluation};
use crate::service::{AppState, LoadedModel, ServiceConfig};
use crate::taxonomy::load_taxonomy;
use crate::training::{
    self, fold_dir, read_history, run_cross_validation, ExperimentConfig, TrainOptions, CHECKPOINT_FILE,
    HISTORY_FILE, PREDICTIONS_FILE,
};

#[derive(Debug, Parser)]
#[command(name = "habitat", version, about = "Habitat photo classification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a class-per-directory image tree and write a manifest.
    Ingest(IngestArgs),
    /// Assign the manifest's images to stratified cross-validation folds.
    Split(SplitArgs),
    /// Train one model per fold and evaluate it on the held-out fold.
    Train(Box<TrainArgs>),
    /// Compute metrics, tables and a confusion heatmap from prediction logs.
    Eval(EvalArgs),
    /// Summarise a finished training run directory.
    Report(ReportArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TaxonomyArg {
    /// Taxonomy TOML file; the built-in 18-class taxonomy when omitted.
    #[arg(long, env = "HABITAT_TAXONOMY")]
    pub taxonomy: Option<PathBuf>,
}

impl TaxonomyArg {
    fn load(&self) -> Result<ClassTaxonomy> {
        load_taxonomy(self.taxonomy.as_deref())
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Root directory with one subdirectory per class abbreviation.
    #[arg(long)]
    pub data_root: PathBuf,
    #[command(flatten)]
    pub taxonomy: TaxonomyArg,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip report; defaults to `skipped.json` beside the manifest.
    #[arg(long)]
    pub skip_report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Manifest from `habitat ingest`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub taxonomy: TaxonomyArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Seed for the fold shuffle; the same seed gives a byte-identical file.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fold assignment file to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// Experiment overrides. Unset flags fall back to the config file.
#[derive(Debug, Default, Args)]
pub struct ExperimentFlags {
    /// Master seed, fanned out to every random component.
    #[arg(long)]
    pub seed: Option<u64>,
    /// AdamW learning rate [default: 1e-4]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// AdamW weight decay [default: 1e-4]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Epochs without a validation accuracy gain before stopping [default: 7]
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    /// [default: true]
    #[arg(long)]
    pub early_stopping: Option<bool>,
    /// f16 forward and backward with loss scaling [default: true]
    #[arg(long)]
    pub mixed_precision: Option<bool>,
    /// Accepted for config compatibility; has no effect on this backend
    #[arg(long)]
    pub gradient_checkpointing: Option<bool>,
    /// Images per class after balancing.
    #[arg(long)]
    pub target_per_class: Option<usize>,
    /// deeplabv3_resnet101, deeplabv3_resnet50 or tiny [default: deeplabv3_resnet101]
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    /// Start from published COCO weights [default: true]
    #[arg(long)]
    pub pretrained: Option<bool>,
    /// [default: 0.5]
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    /// Square input size in pixels, applied to preprocessing and the model.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// [default: 0.5]
    #[arg(long)]
    pub horizontal_flip_prob: Option<f64>,
    /// Maximum random rotation either way [default: 15]
    #[arg(long)]
    pub rotation_degrees: Option<f64>,
    /// [default: true]
    #[arg(long)]
    pub autoaugment: Option<bool>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest from `habitat ingest`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold assignment from `habitat split`.
    #[arg(long)]
    pub folds: PathBuf,
    #[command(flatten)]
    pub taxonomy: TaxonomyArg,
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub output_dir: PathBuf,
    /// Exact run directory, instead of a timestamped one.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Train only these folds (repeatable).
    #[arg(long = "fold")]
    pub only_folds: Vec<usize>,
    /// Cache for pretrained backbone weights.
    #[arg(long, env = "HABITAT_WEIGHTS_DIR")]
    pub weights_dir: Option<PathBuf>,
    /// Never download pretrained weights.
    #[arg(long)]
    pub offline: bool,
    #[command(flatten)]
    pub flags: ExperimentFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction logs (JSON lines), one or more.
    #[arg(long = "predictions", required = true, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    #[command(flatten)]
    pub taxonomy: TaxonomyArg,
    /// Directory for metrics.json, metrics.txt and the heatmap.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by `habitat train`.
    #[arg(long)]
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub taxonomy: TaxonomyArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint to serve; without one the service answers 503.
    #[arg(long, env = "HABITAT_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub taxonomy: TaxonomyArg,
    #[arg(long, env = "HABITAT_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "HABITAT_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Working directory for uploads, retained images and feedback logs.
    #[arg(long, env = "HABITAT_STATE_DIR", default_value = "habitat-state")]
    pub state_dir: PathBuf,
    /// Where consented uploads are kept; `<state-dir>/retained` by default.
    #[arg(long, env = "HABITAT_RETENTION_DIR")]
    pub retention_dir: Option<PathBuf>,
    /// Feedback log directory; `<state-dir>/feedback` by default.
    #[arg(long, env = "HABITAT_LOG_DIR")]
    pub log_dir: Option<PathBuf>,
    /// Per-file upload limit in bytes.
    #[arg(long, env = "HABITAT_MAX_UPLOAD_BYTES", default_value_t = ServiceConfig::DEFAULT_MAX_FILE_BYTES)]
    pub max_upload_bytes: usize,
    /// How long an upload stays available for feedback.
    #[arg(long, env = "HABITAT_SESSION_TTL_SECS", default_value_t = 3600)]
    pub session_ttl_secs: u64,
    /// Feedback log size that triggers rotation.
    #[arg(long, env = "HABITAT_ROTATE_BYTES", default_value_t = ServiceConfig::DEFAULT_ROTATE_BYTES)]
    pub rotate_bytes: u64,
    /// Shared bearer token required by every endpoint except /health.
    #[arg(long, env = "HABITAT_AUTH_TOKEN", hide_env_values = true)]
    pub auth_token: Option<String>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub preprocess: habitat_core::preprocess::PreprocessConfig,
    pub augment: habitat_core::augment::AugmentConfig,
    pub balance: habitat_core::balance::BalanceConfig,
    pub model: crate::model::ClassifierConfig,
    pub training: training::TrainingConfig,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| HabitatError::Config(format!("{}: {e}", path.display())))
    }
}

/// Merges flags over the file over defaults. Returns the configuration and
/// the master seed it was fanned out from, if any.
pub fn resolve_experiment(
    file: Option<RunConfig>,
    flags: &ExperimentFlags,
    taxonomy: &ClassTaxonomy,
) -> Result<(ExperimentConfig, Option<u64>)> {
    let file = file.unwrap_or_default();
    let seed = flags.seed.or(file.seed);
    let mut cfg = ExperimentConfig {
        preprocess: file.preprocess,
        augment: file.augment,
        balance: file.balance,
        model: file.model,
        training: file.training,
    };
    if let Some(s) = seed {
        cfg = cfg.seeded(s);
    }
    let t = &mut cfg.training;
    set(&mut t.learning_rate, flags.learning_rate);
    set(&mut t.weight_decay, flags.weight_decay);
    set(&mut t.batch_size, flags.batch_size);
    set(&mut t.max_epochs, flags.max_epochs);
    set(&mut t.early_stop_patience, flags.early_stop_patience);
    set(&mut t.early_stopping, flags.early_stopping);
    set(&mut t.mixed_precision, flags.mixed_precision);
    set(&mut t.gradient_checkpointing, flags.gradient_checkpointing);
    set(&mut cfg.balance.target_per_class, flags.target_per_class);
    set(&mut cfg.model.backbone, flags.backbone);
    set(&mut cfg.model.pretrained, flags.pretrained);
    set(&mut cfg.model.dropout_rate, flags.dropout_rate);
    if let Some(size) = flags.input_size {
        cfg.model.input_size = size;
        cfg.preprocess.target_size = size;
    }
    set(&mut cfg.augment.horizontal_flip_prob, flags.horizontal_flip_prob);
    set(&mut cfg.augment.rotation_degrees, flags.rotation_degrees);
    set(&mut cfg.augment.use_autoaugment_policy, flags.autoaugment);
    cfg.model.n_classes = taxonomy.len();
    cfg.validate()?;
    Ok((cfg, seed))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn echo_config(command: &str, value: &impl Serialize) -> Result<String> {
    let text = toml::to_string_pretty(value).map_err(|e| HabitatError::Config(e.to_string()))?;
    tracing::info!("{command}: effective configuration\n{text}");
    Ok(text)
}

/// `{timestamp}-seed{seed}` under `parent`.
pub fn run_directory_name(seed: u64) -> String {
    format!("{}-seed{seed}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Split(a) => cmd_split(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

#[derive(Serialize)]
struct IngestEcho<'a> {
    data_root: &'a Path,
    taxonomy: &'a str,
    out: &'a Path,
    skip_report: &'a Path,
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let taxonomy = a.taxonomy.load()?;
    let skip_path = a
        .skip_report
        .clone()
        .unwrap_or_else(|| a.out.with_file_name("skipped.json"));
    echo_config(
        "ingest",
        &IngestEcho {
            data_root: &a.data_root,
            taxonomy: taxonomy.version(),
            out: &a.out,
            skip_report: &skip_path,
        },
    )?;
    let outcome = ingest_directory(&a.data_root, &taxonomy)?;
    write_manifest(&outcome.corpus, &a.out)?;
    write_skip_report(&outcome.skipped, &skip_path)?;
    let back = read_manifest(&a.out, &taxonomy)?;
    if back.manifest != outcome.corpus.manifest {
        return Err(HabitatError::Config("manifest did not read back identically".into()));
    }
    for s in &outcome.skipped {
        tracing::warn!(path = %s.path, reason = %s.reason, "skipped");
    }
    println!(
        "{} images in {} classes; {} skipped",
        back.manifest.len(),
        back.manifest.per_class_counts().len(),
        outcome.skipped.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitEcho<'a> {
    manifest: &'a Path,
    folds: usize,
    seed: u64,
    out: &'a Path,
}

pub fn cmd_split(a: &SplitArgs) -> Result<()> {
    echo_config(
        "split",
        &SplitEcho {
            manifest: &a.manifest,
            folds: a.folds,
            seed: a.seed,
            out: &a.out,
        },
    )?;
    let taxonomy = a.taxonomy.load()?;
    let corpus = read_manifest(&a.manifest, &taxonomy)?;
    let folds = stratified_kfold_split(&corpus.manifest, a.folds, a.seed)?;
    write_folds(&folds, &a.out)?;
    let back = read_folds(&a.out)?;
    back.validate_against(&corpus.manifest)?;
    if back != folds {
        return Err(HabitatError::Config("fold file did not read back identically".into()));
    }
    println!("{} images assigned to {} folds", corpus.manifest.len(), a.folds);
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let taxonomy = a.taxonomy.load()?;
    let file = a.config.as_deref().map(RunConfig::read).transpose()?;
    let (cfg, seed) = resolve_experiment(file, &a.flags, &taxonomy)?;
    let corpus = read_manifest(&a.manifest, &taxonomy)?;
    let folds = read_folds(&a.folds)?;
    folds.validate_against(&corpus.manifest)?;
    for f in &a.only_folds {
        if *f >= folds.n_folds() {
            return Err(HabitatError::Config(format!(
                "--fold {f} is out of range for {} folds",
                folds.n_folds()
            )));
        }
    }
    let run_dir = a
        .run_dir
        .clone()
        .unwrap_or_else(|| a.output_dir.join(run_directory_name(seed.unwrap_or(cfg.training.seed))));
    std::fs::create_dir_all(&run_dir).at(&run_dir)?;
    let effective = RunConfig {
        seed,
        preprocess: cfg.preprocess,
        augment: cfg.augment,
        balance: cfg.balance,
        model: cfg.model.clone(),
        training: cfg.training.clone(),
    };
    let text = echo_config("train", &effective)?;
    let config_path = run_dir.join("config.toml");
    std::fs::write(&config_path, text).at(&config_path)?;

    let mut weights = WeightSource::default();
    if let Some(dir) = &a.weights_dir {
        weights.cache_dir = dir.clone();
    }
    weights.allow_download = !a.offline;
    let opts = TrainOptions {
        out_dir: Some(run_dir.clone()),
        weights,
    };
    let only = (!a.only_folds.is_empty()).then_some(a.only_folds.as_slice());
    let cv = match run_cross_validation(&corpus, &folds, &taxonomy, &cfg, &opts, only) {
        Ok(cv) => cv,
        Err(partial) => {
            let done: Vec<usize> = partial.completed.iter().map(|r| r.fold).collect();
            tracing::error!(completed_folds = ?done, "training stopped early; completed folds are kept");
            return Err(partial.error);
        }
    };
    let summary_path = run_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&cv.summary)?).at(&summary_path)?;
    write_learning_curves(&cv.summary.learning_curves, &run_dir.join("learning_curves.csv"))?;
    let records: Vec<_> = cv.results.iter().flat_map(|r| r.prediction_records.clone()).collect();
    let eval = evaluate_records(&records, &taxonomy)?;
    write_evaluation(&eval, &taxonomy, &run_dir.join("evaluation"))?;

    for r in &cv.results {
        let dir = fold_dir(&run_dir, r.fold);
        let meta = read_checkpoint_meta(&dir.join(CHECKPOINT_FILE))?;
        meta.check_compatible(&taxonomy)?;
        if meta.epoch != r.best_epoch || read_history(&dir.join(HISTORY_FILE))?.len() != r.history.len() {
            return Err(HabitatError::Integrity(format!("fold {} outputs are inconsistent", r.fold)));
        }
        if read_prediction_log(&dir.join(PREDICTIONS_FILE))?.len() != r.prediction_records.len() {
            return Err(HabitatError::Integrity(format!("fold {} prediction log is incomplete", r.fold)));
        }
        println!(
            "fold {}: best epoch {} of {}, validation accuracy {:.4}",
            r.fold,
            r.best_epoch,
            r.history.len(),
            r.best_val_accuracy
        );
    }
    print!("{}", render_table(&eval, &taxonomy));
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn write_learning_curves(bands: &[training::EpochBand], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "n_folds",
        "train_acc_mean",
        "train_acc_std",
        "val_acc_mean",
        "val_acc_std",
        "val_loss_mean",
        "val_loss_std",
    ])?;
    for b in bands {
        w.write_record([
            b.epoch.to_string(),
            b.n_folds.to_string(),
            b.train_accuracy.mean.to_string(),
            b.train_accuracy.std.to_string(),
            b.val_accuracy.mean.to_string(),
            b.val_accuracy.std.to_string(),
            b.val_loss.mean.to_string(),
            b.val_loss.std.to_string(),
        ])?;
    }
    w.flush().at(path)
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    predictions: &'a [PathBuf],
    taxonomy: &'a str,
    out: &'a Path,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let taxonomy = a.taxonomy.load()?;
    echo_config(
        "eval",
        &EvalEcho {
            predictions: &a.predictions,
            taxonomy: taxonomy.version(),
            out: &a.out,
        },
    )?;
    let mut records = Vec::new();
    for p in &a.predictions {
        records.extend(read_prediction_log(p)?);
    }
    let eval = evaluate_records(&records, &taxonomy)?;
    write_evaluation(&eval, &taxonomy, &a.out)?;
    if read_evaluation(&a.out)? != eval {
        return Err(HabitatError::Integrity("metrics file did not read back identically".into()));
    }
    print!("{}", render_table(&eval, &taxonomy));
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let taxonomy = a.taxonomy.load()?;
    echo_config(
        "report",
        &EvalEcho {
            predictions: &[],
            taxonomy: taxonomy.version(),
            out: &a.run_dir,
        },
    )?;
    let mut fold_dirs: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&a.run_dir).at(&a.run_dir)? {
        let entry = entry.at(&a.run_dir)?;
        let name = entry.file_name();
        if let Some(f) = name.to_str().and_then(|n| n.strip_prefix("fold_")).and_then(|n| n.parse().ok()) {
            fold_dirs.push((f, entry.path()));
        }
    }
    fold_dirs.sort();
    let mut records = Vec::new();
    for (fold, dir) in fold_dirs {
        let history = read_history(&dir.join(HISTORY_FILE))?;
        let meta = read_checkpoint_meta(&dir.join(CHECKPOINT_FILE))?;
        meta.check_compatible(&taxonomy)?;
        println!(
            "fold {fold}: {} epochs, best epoch {} (validation accuracy {:.4}), model {}",
            history.len(),
            meta.epoch,
            meta.val_accuracy,
            meta.model_version
        );
        records.extend(read_prediction_log(&dir.join(PREDICTIONS_FILE))?);
    }
    if records.is_empty() {
        return Err(HabitatError::Config(format!(
            "no fold outputs under {}",
            a.run_dir.display()
        )));
    }
    let eval = evaluate_records(&records, &taxonomy)?;
    let out = a.run_dir.join("evaluation");
    write_evaluation(&eval, &taxonomy, &out)?;
    read_evaluation(&out)?;
    print!("{}", render_table(&eval, &taxonomy));
    Ok(())
}

#[derive(Serialize)]
struct ServeEcho<'a> {
    checkpoint: Option<&'a Path>,
    taxonomy: &'a str,
    address: String,
    upload_dir: &'a Path,
    retention_dir: &'a Path,
    log_dir: &'a Path,
    max_upload_bytes: usize,
    session_ttl_secs: u64,
    rotate_bytes: u64,
    auth: bool,
}

pub fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let taxonomy = a.taxonomy.load()?;
    let mut config = ServiceConfig::under(&a.state_dir);
    if let Some(d) = &a.retention_dir {
        config.retention_dir = d.clone();
    }
    if let Some(d) = &a.log_dir {
        config.log_dir = d.clone();
    }
    config.max_file_bytes = a.max_upload_bytes;
    config.session_ttl = Duration::from_secs(a.session_ttl_secs);
    config.rotate_bytes = a.rotate_bytes;
    config.auth_token = a.auth_token.clone();
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| HabitatError::Config(format!("bad listen address: {e}")))?;
    echo_config(
        "serve",
        &ServeEcho {
            checkpoint: a.checkpoint.as_deref(),
            taxonomy: taxonomy.version(),
            address: addr.to_string(),
            upload_dir: &config.upload_dir,
            retention_dir: &config.retention_dir,
            log_dir: &config.log_dir,
            max_upload_bytes: config.max_file_bytes,
            session_ttl_secs: a.session_ttl_secs,
            rotate_bytes: config.rotate_bytes,
            auth: config.auth_token.is_some(),
        },
    )?;
    let model = match &a.checkpoint {
        Some(p) => Some(LoadedModel::from_checkpoint(p, &taxonomy)?),
        None => {
            tracing::warn!("no checkpoint given; /predict and /health will answer 503");
            None
        }
    };
    let state = Arc::new(AppState::new(model, taxonomy, config)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| HabitatError::io("tokio runtime", e))?;
    runtime.block_on(crate::service::serve(state, addr))
}
