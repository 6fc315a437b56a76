//! Per-fold training and k-fold cross-validation.
//!
//! Each fold balances its training portion, fine-tunes every parameter with
//! AdamW on cross-entropy, evaluates the untouched validation fold after
//! every epoch and keeps the weights of the epoch with the highest
//! validation accuracy (earliest epoch on ties). Training stops at
//! `max_epochs` or after `early_stop_patience` epochs without a strict
//! improvement.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use habitat_core::augment::{preprocess_train, AugmentConfig};
use habitat_core::balance::{balance_for_taxonomy, BalanceConfig, BalancedRecord, BalancedSet};
use habitat_core::early_stopping::{EarlyStopping, NO_PATIENCE_LIMIT};
use habitat_core::folds::FoldAssignment;
use habitat_core::metrics::{
    aggregate_folds, cross_entropy, mean_std, metrics_report, AggregateReport, MeanStd,
    MetricsReport, PredictionRecord,
};
use habitat_core::preprocess::{preprocess_eval, ImageTensor, PreprocessConfig};
use habitat_core::raster::Raster;
use habitat_core::record::ImageRecord;
use habitat_core::{rng, ClassTaxonomy};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::dataset::{write_balanced_set, Corpus};
use crate::error::{HabitatError, IoContext, Result};
use crate::imaging;
use crate::model::{
    argmax_rows, build_classifier_with, cross_entropy_loss, images_to_batch, Classifier,
    ClassifierConfig, Mode, WeightSource,
};
use crate::report::write_prediction_log;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// When false, training always runs `max_epochs` epochs.
    pub early_stopping: bool,
    pub mixed_precision: bool,
    pub gradient_checkpointing: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            early_stop_patience: 7,
            early_stopping: true,
            mixed_precision: true,
            gradient_checkpointing: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HabitatError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be >= 1");
        }
        Ok(())
    }

    fn patience(&self) -> usize {
        if self.early_stopping {
            self.early_stop_patience
        } else {
            NO_PATIENCE_LIMIT
        }
    }

    pub fn optimizer_params(&self) -> ParamsAdamW {
        ParamsAdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Every configuration the training pipeline consumes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub balance: BalanceConfig,
    pub model: ClassifierConfig,
    pub training: TrainingConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.balance.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.model.input_size != self.preprocess.target_size {
            return Err(HabitatError::Config(format!(
                "model input_size {} differs from preprocess target_size {}",
                self.model.input_size, self.preprocess.target_size
            )));
        }
        Ok(())
    }

    /// Derives every component seed from one master seed.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.augment.seed = rng::derive_seed(seed, "augment");
        self.balance.seed = rng::derive_seed(seed, "balance");
        self.model.seed = rng::derive_seed(seed, "model");
        self.training.seed = rng::derive_seed(seed, "training");
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    #[serde(rename = "train_acc")]
    pub train_accuracy: f64,
    #[serde(rename = "val_acc")]
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
    /// Saved best checkpoint, when an output directory was given.
    pub best_checkpoint: Option<PathBuf>,
    pub checkpoint_meta: CheckpointMeta,
    /// Validation predictions of the best checkpoint.
    pub prediction_records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Per-fold artefacts go to `out_dir/fold_{i}/`.
    pub out_dir: Option<PathBuf>,
    pub weights: WeightSource,
}

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "best.safetensors";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const BALANCED_FILE: &str = "balanced.jsonl";

pub fn fold_dir(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join(format!("fold_{fold}"))
}

pub fn write_history(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush().at(path)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochStats>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn map_backend(err: HabitatError) -> HabitatError {
    match &err {
        HabitatError::Tensor(e) => {
            let msg = e.to_string();
            let lower = msg.to_ascii_lowercase();
            if lower.contains("out of memory") || lower.contains("memory allocation") {
                HabitatError::OutOfMemory(msg)
            } else {
                err
            }
        }
        _ => err,
    }
}

/// Decoded images, shared across epochs when they fit a byte budget.
struct ImageCache {
    root: PathBuf,
    map: Mutex<HashMap<String, Arc<Raster>>>,
    budget: Mutex<usize>,
}

const IMAGE_CACHE_BYTES: usize = 1 << 30;

impl ImageCache {
    fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            map: Mutex::new(HashMap::new()),
            budget: Mutex::new(IMAGE_CACHE_BYTES),
        }
    }

    fn get(&self, rel: &str) -> Result<Arc<Raster>> {
        if let Some(r) = self.map.lock().expect("cache lock").get(rel) {
            return Ok(r.clone());
        }
        let raster = Arc::new(imaging::read_image(&self.root.join(rel))?);
        let size = raster.as_bytes().len();
        let mut budget = self.budget.lock().expect("cache lock");
        if size <= *budget {
            *budget -= size;
            self.map
                .lock()
                .expect("cache lock")
                .insert(rel.to_string(), raster.clone());
        }
        Ok(raster)
    }
}

/// Dynamic loss scaling for half-precision steps.
struct LossScaler {
    scale: f64,
    good_steps: usize,
}

impl LossScaler {
    const INITIAL: f64 = 65536.0;
    const GROWTH_INTERVAL: usize = 2000;
    const MIN: f64 = 1.0;

    fn new() -> Self {
        Self {
            scale: Self::INITIAL,
            good_steps: 0,
        }
    }

    fn overflowed(&mut self) -> bool {
        self.scale /= 2.0;
        self.good_steps = 0;
        self.scale >= Self::MIN
    }

    fn succeeded(&mut self) {
        self.good_steps += 1;
        if self.good_steps == Self::GROWTH_INTERVAL {
            self.scale *= 2.0;
            self.good_steps = 0;
        }
    }
}

struct Trainer<'a> {
    corpus: &'a Corpus,
    taxonomy: &'a ClassTaxonomy,
    cfg: &'a ExperimentConfig,
    fold: usize,
    cache: ImageCache,
}

impl Trainer<'_> {
    fn train_tensor(&self, entry: &BalancedRecord, epoch: usize) -> Result<ImageTensor> {
        let raster = self.cache.get(&entry.record.path)?;
        let seed = match entry.augmentation_seed {
            // Synthetic copies replay the same transform every epoch.
            Some(s) => s,
            None => rng::derive_indexed(
                rng::derive_seed(self.cfg.augment.seed, &entry.record.id),
                "epoch",
                epoch as u64,
            ),
        };
        let mut r = rng::stream(seed);
        Ok(preprocess_train(
            &raster,
            &self.cfg.preprocess,
            &self.cfg.augment,
            &mut r,
        )?)
    }

    fn eval_tensor(&self, record: &ImageRecord) -> Result<ImageTensor> {
        let raster = self.cache.get(&record.path)?;
        Ok(preprocess_eval(&raster, &self.cfg.preprocess)?)
    }

    fn label_index(&self, record: &ImageRecord) -> Result<u32> {
        Ok(self.taxonomy.require(&record.label)? as u32)
    }

    /// Batches of indices for one epoch. A trailing batch of one image is
    /// merged into the previous batch, since batch statistics need two.
    fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(rng::derive_indexed(self.cfg.training.seed, "shuffle", epoch as u64));
        order.shuffle(&mut r);
        let mut batches: Vec<Vec<usize>> = order
            .chunks(self.cfg.training.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(last);
        }
        batches
    }

    fn evaluate(&self, model: &Classifier, val: &[&ImageRecord]) -> Result<Vec<PredictionRecord>> {
        let mut out = Vec::with_capacity(val.len());
        for chunk in val.chunks(self.cfg.training.batch_size) {
            let tensors: Vec<ImageTensor> = chunk
                .par_iter()
                .map(|r| self.eval_tensor(r))
                .collect::<Result<_>>()?;
            let probs = model.predict_probabilities(&tensors).map_err(map_backend)?;
            for (rec, p) in chunk.iter().zip(probs) {
                out.push(PredictionRecord::from_probabilities(
                    rec.id.clone(),
                    &rec.label,
                    p,
                    self.taxonomy,
                    self.fold,
                )?);
            }
        }
        Ok(out)
    }
}

fn all_finite(grads: &GradStore, vars: &[candle_core::Var]) -> Result<bool> {
    for v in vars {
        if let Some(g) = grads.get(v) {
            let s: f32 = g.sqr()?.sum_all()?.to_scalar()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn unscale(grads: &mut GradStore, vars: &[candle_core::Var], scale: f64) -> Result<()> {
    for v in vars {
        if let Some(g) = grads.remove(v) {
            grads.insert(v, (g / scale)?);
        }
    }
    Ok(())
}

/// Epoch, validation accuracy, parameter snapshot and predictions.
type BestEpoch = (usize, f64, BTreeMap<String, Tensor>, Vec<PredictionRecord>);

/// Trains one fold. The validation fold is `fold_index` of `folds`.
pub fn train_fold(
    corpus: &Corpus,
    folds: &FoldAssignment,
    fold_index: usize,
    taxonomy: &ClassTaxonomy,
    cfg: &ExperimentConfig,
    opts: &TrainOptions,
) -> Result<FoldResult> {
    cfg.validate()?;
    if cfg.model.n_classes != taxonomy.len() {
        return Err(HabitatError::Config(format!(
            "model n_classes {} differs from the taxonomy's {} classes",
            cfg.model.n_classes,
            taxonomy.len()
        )));
    }
    folds.validate_against(&corpus.manifest)?;
    let (train, val) = folds.split(&corpus.manifest, fold_index)?;
    let train: Vec<ImageRecord> = train.into_iter().cloned().collect();
    let balance = BalanceConfig {
        seed: rng::derive_indexed(cfg.balance.seed, "fold", fold_index as u64),
        ..cfg.balance
    };
    let balanced: BalancedSet = balance_for_taxonomy(&train, taxonomy, &balance)?;
    let fold_out = opts.out_dir.as_ref().map(|d| fold_dir(d, fold_index));
    if let Some(dir) = &fold_out {
        std::fs::create_dir_all(dir).at(dir)?;
        write_balanced_set(&balanced, &dir.join(BALANCED_FILE))?;
    }

    let tc = &cfg.training;
    if tc.gradient_checkpointing {
        tracing::debug!("gradient checkpointing requested; activations are kept in memory by this backend");
    }
    let mut model = build_classifier_with(&cfg.model, &opts.weights)?;
    model.set_mixed_precision(tc.mixed_precision);
    let vars = model.trainable_vars();
    let mut opt = AdamW::new(vars.clone(), tc.optimizer_params())?;
    let mut scaler = tc.mixed_precision.then(LossScaler::new);

    let trainer = Trainer {
        corpus,
        taxonomy,
        cfg,
        fold: fold_index,
        cache: ImageCache::new(&corpus.data_root),
    };
    let entries = balanced.entries();
    let targets: Vec<u32> = entries
        .iter()
        .map(|e| trainer.label_index(&e.record))
        .collect::<Result<_>>()?;

    let mut history = Vec::new();
    let mut stopping = EarlyStopping::default();
    let mut best: Option<BestEpoch> = None;
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 1..=tc.max_epochs {
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in trainer.epoch_batches(entries.len(), epoch) {
            let tensors: Vec<ImageTensor> = batch
                .par_iter()
                .map(|i| trainer.train_tensor(&entries[*i], epoch))
                .collect::<Result<_>>()?;
            let y: Vec<u32> = batch.iter().map(|i| targets[*i]).collect();
            let x = images_to_batch(&tensors)?;
            let step_seed = rng::derive_indexed(tc.seed, "step", step as u64);
            step += 1;
            let logits = model.forward(&x, Mode::Train { step_seed }).map_err(map_backend)?;
            let loss = cross_entropy_loss(&logits, &y)?;
            let loss_value: f32 = loss.to_scalar()?;
            if !loss_value.is_finite() && scaler.is_none() {
                return Err(HabitatError::NonFiniteLoss {
                    epoch,
                    step,
                    diagnostics: format!(
                        "loss {loss_value}, learning rate {}, batch labels {y:?}",
                        tc.learning_rate
                    ),
                });
            }
            let pred = argmax_rows(&logits)?;
            correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
            seen += y.len();

            match scaler.as_mut() {
                None => {
                    let grads = loss.backward().map_err(|e| map_backend(e.into()))?;
                    opt.step(&grads)?;
                }
                Some(s) => {
                    let mut grads = (loss * s.scale)?
                        .backward()
                        .map_err(|e| map_backend(e.into()))?;
                    if loss_value.is_finite() && all_finite(&grads, &vars)? {
                        unscale(&mut grads, &vars, s.scale)?;
                        opt.step(&grads)?;
                        s.succeeded();
                    } else if !s.overflowed() {
                        return Err(HabitatError::NonFiniteLoss {
                            epoch,
                            step,
                            diagnostics: format!(
                                "loss {loss_value}; gradients stayed non-finite down to loss scale {}",
                                s.scale
                            ),
                        });
                    }
                }
            }
        }

        let val_refs: Vec<&ImageRecord> = val.to_vec();
        let records = trainer.evaluate(&model, &val_refs)?;
        let val_accuracy = records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64;
        let val_loss = records
            .iter()
            .map(|r| cross_entropy(&r.probabilities, taxonomy.index_of(&r.true_label).unwrap_or(0)))
            .sum::<f64>()
            / records.len() as f64;
        let stats = EpochStats {
            epoch,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_accuracy,
            val_loss,
        };
        tracing::info!(
            fold = fold_index,
            epoch,
            train_acc = stats.train_accuracy,
            val_acc = stats.val_accuracy,
            val_loss = stats.val_loss,
            "epoch finished"
        );
        history.push(stats);
        let decision = stopping.update(val_accuracy, tc.patience());
        if decision.improved {
            best = Some((epoch, val_accuracy, model.state()?, records));
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_accuracy, state, prediction_records) =
        best.expect("at least one epoch ran");
    model.restore(&state)?;
    let mut meta = CheckpointMeta::new(&model, taxonomy, best_epoch, best_val_accuracy);
    meta.fold = Some(fold_index);
    let mut best_checkpoint = None;
    if let Some(dir) = &fold_out {
        let path = dir.join(CHECKPOINT_FILE);
        meta = save_checkpoint(&model, &meta, &path)?;
        best_checkpoint = Some(path);
        write_history(&history, &dir.join(HISTORY_FILE))?;
        write_prediction_log(&prediction_records, &dir.join(PREDICTIONS_FILE))?;
    }
    let _ = trainer.corpus;
    Ok(FoldResult {
        fold: fold_index,
        best_epoch,
        best_val_accuracy,
        history,
        stopped_early,
        best_checkpoint,
        checkpoint_meta: meta,
        prediction_records,
    })
}

/// Mean and spread of the learning curves across folds, per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochBand {
    pub epoch: usize,
    pub n_folds: usize,
    pub train_accuracy: MeanStd,
    pub val_accuracy: MeanStd,
    pub val_loss: MeanStd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidationSummary {
    pub fold_reports: Vec<MetricsReport>,
    pub aggregate: AggregateReport,
    pub best_val_accuracy: MeanStd,
    pub learning_curves: Vec<EpochBand>,
}

pub fn summarize(results: &[FoldResult], taxonomy: &ClassTaxonomy) -> Result<CrossValidationSummary> {
    let fold_reports = results
        .iter()
        .map(|r| metrics_report(&r.prediction_records, taxonomy))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let aggregate = aggregate_folds(&fold_reports)?;
    let best: Vec<f64> = results.iter().map(|r| r.best_val_accuracy).collect();
    let longest = results.iter().map(|r| r.history.len()).max().unwrap_or(0);
    let learning_curves = (0..longest)
        .map(|i| {
            let rows: Vec<&EpochStats> = results.iter().filter_map(|r| r.history.get(i)).collect();
            let pick = |f: fn(&EpochStats) -> f64| mean_std(&rows.iter().map(|s| f(s)).collect::<Vec<_>>());
            EpochBand {
                epoch: i + 1,
                n_folds: rows.len(),
                train_accuracy: pick(|s| s.train_accuracy),
                val_accuracy: pick(|s| s.val_accuracy),
                val_loss: pick(|s| s.val_loss),
            }
        })
        .collect();
    Ok(CrossValidationSummary {
        fold_reports,
        aggregate,
        best_val_accuracy: mean_std(&best),
        learning_curves,
    })
}

/// Returned when a fold fails: the folds that finished, and the error.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct PartialCrossValidation {
    pub completed: Vec<FoldResult>,
    pub error: HabitatError,
}

pub struct CrossValidation {
    pub results: Vec<FoldResult>,
    pub summary: CrossValidationSummary,
}

/// Trains every fold of `folds` (or only `only`) in order.
pub fn run_cross_validation(
    corpus: &Corpus,
    folds: &FoldAssignment,
    taxonomy: &ClassTaxonomy,
    cfg: &ExperimentConfig,
    opts: &TrainOptions,
    only: Option<&[usize]>,
) -> std::result::Result<CrossValidation, Box<PartialCrossValidation>> {
    let selected: Vec<usize> = match only {
        Some(f) => f.to_vec(),
        None => (0..folds.n_folds()).collect(),
    };
    let mut completed = Vec::with_capacity(selected.len());
    for fold in selected {
        match train_fold(corpus, folds, fold, taxonomy, cfg, opts) {
            Ok(r) => completed.push(r),
            Err(e) => {
                return Err(Box::new(PartialCrossValidation {
                    completed,
                    error: HabitatError::Fold {
                        fold,
                        source: Box::new(e),
                    },
                }))
            }
        }
    }
    match summarize(&completed, taxonomy) {
        Ok(summary) => Ok(CrossValidation {
            results: completed,
            summary,
        }),
        Err(error) => Err(Box::new(PartialCrossValidation { completed, error })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_setup() {
        let t = TrainingConfig::default();
        assert_eq!(t.learning_rate, 1e-4);
        assert_eq!(t.weight_decay, 1e-4);
        assert_eq!(t.batch_size, 16);
        assert_eq!(t.max_epochs, 100);
        assert_eq!(t.early_stop_patience, 7);
        let p = t.optimizer_params();
        assert_eq!((p.lr, p.weight_decay), (1e-4, 1e-4));
        assert_eq!(ExperimentConfig::default().balance.target_per_class, 1000);
        assert_eq!(ExperimentConfig::default().model.dropout_rate, 0.5);
    }

    #[test]
    fn validation() {
        let bad = TrainingConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig {
            early_stop_patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.model.input_size = 128;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn history_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let h = vec![EpochStats {
            epoch: 1,
            train_accuracy: 0.5,
            val_accuracy: 0.25,
            val_loss: 1.5,
        }];
        write_history(&h, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_acc,val_acc,val_loss\n"), "{text}");
        assert_eq!(read_history(&path).unwrap(), h);
    }

    #[test]
    fn seeds_fan_out() {
        let a = ExperimentConfig::default().seeded(42);
        let b = ExperimentConfig::default().seeded(42);
        assert_eq!(a, b);
        assert_ne!(a.augment.seed, a.balance.seed);
        assert_ne!(a.model.seed, a.training.seed);
    }

    #[test]
    fn loss_scaler_backs_off() {
        let mut s = LossScaler::new();
        assert!(s.overflowed());
        assert_eq!(s.scale, LossScaler::INITIAL / 2.0);
        for _ in 0..LossScaler::GROWTH_INTERVAL {
            s.succeeded();
        }
        assert_eq!(s.scale, LossScaler::INITIAL);
    }
}
