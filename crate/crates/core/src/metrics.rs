//! Evaluation: per-image prediction records, confusion matrices,
//! one-vs-rest precision/recall/F1, top-k accuracy and fold aggregation.
//!
//! Conventions: a ratio whose denominator is zero is reported as 0, and
//! ranking ties are broken towards the lower class index.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::taxonomy::ClassTaxonomy;

/// Probabilities are floored at this value before taking logarithms.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability vector's sum from 1.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-6;
/// Number of ranked labels kept per prediction.
pub const TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RankedLabel {
    pub abbreviation: String,
    pub probability: f64,
}

/// Indices of the `k` largest values, descending, lower index first on ties.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn argmax(values: &[f64]) -> Option<usize> {
    top_k_indices(values, 1).first().copied()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| libm::exp(l - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln(p_true)` with the probability floored at [`PROBABILITY_FLOOR`].
pub fn cross_entropy(probabilities: &[f64], true_index: usize) -> f64 {
    let p = probabilities
        .get(true_index)
        .copied()
        .unwrap_or(0.0)
        .max(PROBABILITY_FLOOR);
    -libm::log(p)
}

/// Everything recorded about one evaluated image.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictionRecord {
    pub image_id: String,
    pub true_label: String,
    pub predicted_label: String,
    pub probabilities: Vec<f64>,
    pub top3: Vec<RankedLabel>,
    pub fold: usize,
}

impl PredictionRecord {
    pub fn from_probabilities(
        image_id: impl Into<String>,
        true_label: &str,
        probabilities: Vec<f64>,
        taxonomy: &ClassTaxonomy,
        fold: usize,
    ) -> Result<Self> {
        taxonomy.require(true_label)?;
        if probabilities.len() != taxonomy.len() {
            return Err(Error::ProbabilityLength {
                expected: taxonomy.len(),
                got: probabilities.len(),
            });
        }
        let sum: f64 = probabilities.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(Error::ProbabilitySum(sum));
        }
        let top3 = rank_labels(&probabilities, taxonomy, TOP_K);
        Ok(Self {
            image_id: image_id.into(),
            true_label: true_label.to_string(),
            predicted_label: top3[0].abbreviation.clone(),
            probabilities,
            top3,
            fold,
        })
    }

    /// Zero-based rank of the true label within `top3`, if present.
    pub fn true_rank(&self) -> Option<usize> {
        self.top3.iter().position(|r| r.abbreviation == self.true_label)
    }

    pub fn is_correct(&self) -> bool {
        self.predicted_label == self.true_label
    }
}

/// The `k` most probable labels in ranking order.
pub fn rank_labels(probabilities: &[f64], taxonomy: &ClassTaxonomy, k: usize) -> Vec<RankedLabel> {
    top_k_indices(probabilities, k)
        .into_iter()
        .map(|i| RankedLabel {
            abbreviation: taxonomy.classes()[i].abbreviation.clone(),
            probability: probabilities[i],
        })
        .collect()
}

/// Square count matrix; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
    taxonomy_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneVsRest {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize, taxonomy_version: impl Into<String>) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
            taxonomy_version: taxonomy_version.into(),
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_rows(rows: &[Vec<u64>], taxonomy_version: impl Into<String>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidConfig("confusion matrix must be square".into()));
        }
        Ok(Self {
            n_classes: n,
            counts: rows.iter().flatten().copied().collect(),
            taxonomy_version: taxonomy_version.into(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn taxonomy_version(&self) -> &str {
        &self.taxonomy_version
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.n_classes + predicted]
    }

    pub fn add(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.n_classes + predicted] += 1;
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.counts[r * self.n_classes..(r + 1) * self.n_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.n_classes.max(1))
    }

    pub fn row_sum(&self, r: usize) -> u64 {
        self.row(r).iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.n_classes).map(|r| self.get(r, c)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Trace over total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    pub fn one_vs_rest(&self, c: usize) -> OneVsRest {
        let tp = self.get(c, c);
        let fp = self.col_sum(c) - tp;
        let fn_ = self.row_sum(c) - tp;
        let tn = self.total() - tp - fp - fn_;
        OneVsRest { tp, fp, fn_, tn }
    }

    /// Element-wise sum, e.g. across folds.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes || other.taxonomy_version != self.taxonomy_version {
            return Err(Error::TaxonomyMismatch {
                expected: self.taxonomy_version.clone(),
                found: other.taxonomy_version.clone(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_matrix(
    records: &[PredictionRecord],
    taxonomy: &ClassTaxonomy,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(taxonomy.len(), taxonomy.version());
    for r in records {
        let t = taxonomy.require(&r.true_label)?;
        let p = taxonomy.require(&r.predicted_label)?;
        cm.add(t, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// One-vs-rest precision, recall and F1 per class, indexed by class index.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.n_classes())
        .map(|c| {
            let o = cm.one_vs_rest(c);
            ClassMetrics::from_counts(o.tp, o.fp, o.fn_)
        })
        .collect()
}

/// One-vs-rest accuracy `(TP + TN) / (TP + TN + FP + FN)` per class.
pub fn one_vs_rest_accuracy(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.n_classes())
        .map(|c| {
            let o = cm.one_vs_rest(c);
            ratio(o.tp + o.tn, o.tp + o.tn + o.fp + o.fn_)
        })
        .collect()
}

/// Fraction of records whose true label is among the first `k` ranked
/// labels. `k = 1` compares against `predicted_label`.
pub fn topk_accuracy(records: &[PredictionRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    if k == 0 || k > TOP_K {
        return Err(Error::InvalidK { k, max: TOP_K });
    }
    let hits = records
        .iter()
        .filter(|r| {
            if k == 1 {
                r.is_correct()
            } else {
                r.true_rank().is_some_and(|rank| rank < k)
            }
        })
        .count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub taxonomy_version: String,
    pub support: usize,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub overall_accuracy: f64,
    pub top1_accuracy: f64,
    pub top3_accuracy: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub val_loss: f64,
    /// Records that carried a probability vector and so entered `val_loss`.
    pub loss_support: usize,
}

/// Builds the full metric set for one evaluation run. Class means are
/// unweighted over every taxonomy class; `val_loss` is the mean
/// cross-entropy over records that carry a probability vector (0 when none
/// do).
pub fn metrics_report(records: &[PredictionRecord], taxonomy: &ClassTaxonomy) -> Result<MetricsReport> {
    let cm = confusion_matrix(records, taxonomy)?;
    let top1 = topk_accuracy(records, 1)?;
    let top3 = topk_accuracy(records, TOP_K.min(taxonomy.len()))?;
    let per = per_class_metrics(&cm);
    let k = per.len() as f64;
    let mut loss = 0.0;
    let mut loss_support = 0usize;
    for r in records.iter().filter(|r| !r.probabilities.is_empty()) {
        loss += cross_entropy(&r.probabilities, taxonomy.require(&r.true_label)?);
        loss_support += 1;
    }
    Ok(MetricsReport {
        taxonomy_version: taxonomy.version().to_string(),
        support: records.len(),
        per_class: taxonomy
            .classes()
            .iter()
            .zip(&per)
            .map(|(c, m)| (c.abbreviation.clone(), *m))
            .collect(),
        overall_accuracy: cm.accuracy(),
        top1_accuracy: top1,
        top3_accuracy: top3,
        mean_precision: per.iter().map(|m| m.precision).sum::<f64>() / k,
        mean_recall: per.iter().map(|m| m.recall).sum::<f64>() / k,
        mean_f1: per.iter().map(|m| m.f1).sum::<f64>() / k,
        val_loss: if loss_support == 0 { 0.0 } else { loss / loss_support as f64 },
        loss_support,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: libm::sqrt(var),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassAggregate {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AggregateReport {
    pub taxonomy_version: String,
    pub n_reports: usize,
    pub overall_accuracy: MeanStd,
    pub top1_accuracy: MeanStd,
    pub top3_accuracy: MeanStd,
    pub mean_precision: MeanStd,
    pub mean_recall: MeanStd,
    pub mean_f1: MeanStd,
    pub val_loss: MeanStd,
    pub per_class: BTreeMap<String, ClassAggregate>,
}

pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or(Error::NoReports)?;
    for r in &reports[1..] {
        let same_classes = r.per_class.keys().eq(first.per_class.keys());
        if r.taxonomy_version != first.taxonomy_version || !same_classes {
            return Err(Error::TaxonomyMismatch {
                expected: first.taxonomy_version.clone(),
                found: r.taxonomy_version.clone(),
            });
        }
    }
    let field = |f: fn(&MetricsReport) -> f64| -> MeanStd {
        let v: Vec<f64> = reports.iter().map(f).collect();
        mean_std(&v)
    };
    let per_class = first
        .per_class
        .keys()
        .map(|abbr| {
            let pick = |f: fn(&ClassMetrics) -> f64| -> MeanStd {
                let v: Vec<f64> = reports.iter().map(|r| f(&r.per_class[abbr])).collect();
                mean_std(&v)
            };
            (
                abbr.clone(),
                ClassAggregate {
                    precision: pick(|m| m.precision),
                    recall: pick(|m| m.recall),
                    f1: pick(|m| m.f1),
                },
            )
        })
        .collect();
    Ok(AggregateReport {
        taxonomy_version: first.taxonomy_version.clone(),
        n_reports: reports.len(),
        overall_accuracy: field(|r| r.overall_accuracy),
        top1_accuracy: field(|r| r.top1_accuracy),
        top3_accuracy: field(|r| r.top3_accuracy),
        mean_precision: field(|r| r.mean_precision),
        mean_recall: field(|r| r.mean_recall),
        mean_f1: field(|r| r.mean_f1),
        val_loss: field(|r| r.val_loss),
        per_class,
    })
}
