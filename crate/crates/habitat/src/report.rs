//! Prediction logs, metric reports and the confusion-matrix heatmap.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use habitat_core::metrics::{
    aggregate_folds, confusion_matrix, metrics_report, AggregateReport, ConfusionMatrix, MetricsReport,
    PredictionRecord, RankedLabel, PROBABILITY_SUM_TOLERANCE, TOP_K,
};
use habitat_core::ClassTaxonomy;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_jsonl, write_jsonl};
use crate::error::{HabitatError, IoContext, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogRank {
    label: String,
    probability: f64,
}

/// One line of a prediction log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogLine {
    image_id: String,
    fold: usize,
    #[serde(rename = "true")]
    true_label: String,
    predicted: String,
    top3: Vec<LogRank>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    probabilities: Vec<f64>,
}

impl From<&PredictionRecord> for LogLine {
    fn from(r: &PredictionRecord) -> Self {
        Self {
            image_id: r.image_id.clone(),
            fold: r.fold,
            true_label: r.true_label.clone(),
            predicted: r.predicted_label.clone(),
            top3: r
                .top3
                .iter()
                .map(|l| LogRank {
                    label: l.abbreviation.clone(),
                    probability: l.probability,
                })
                .collect(),
            probabilities: r.probabilities.clone(),
        }
    }
}

impl LogLine {
    fn check(&self) -> std::result::Result<(), String> {
        if self.top3.is_empty() || self.top3.len() > TOP_K {
            return Err(format!("top3 must hold 1 to {TOP_K} entries, found {}", self.top3.len()));
        }
        if self.top3.windows(2).any(|w| w[0].probability < w[1].probability) {
            return Err("top3 is not in descending probability order".into());
        }
        if self.top3[0].label != self.predicted {
            return Err(format!(
                "predicted `{}` differs from the first top3 label `{}`",
                self.predicted, self.top3[0].label
            ));
        }
        if !self.probabilities.is_empty() {
            let sum: f64 = self.probabilities.iter().sum();
            if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                return Err(format!("probabilities sum to {sum}"));
            }
        }
        Ok(())
    }

    fn into_record(self) -> PredictionRecord {
        PredictionRecord {
            image_id: self.image_id,
            true_label: self.true_label,
            predicted_label: self.predicted,
            probabilities: self.probabilities,
            top3: self
                .top3
                .into_iter()
                .map(|l| RankedLabel {
                    abbreviation: l.label,
                    probability: l.probability,
                })
                .collect(),
            fold: self.fold,
        }
    }
}

/// Writes one JSON object per record, keeping the full probability vector.
pub fn write_prediction_log(records: &[PredictionRecord], path: &Path) -> Result<()> {
    write_jsonl(path, None::<&()>, records.iter().map(LogLine::from))
}

/// Reads a prediction log. The probability vector is optional per line;
/// records without one carry an empty `probabilities`.
pub fn read_prediction_log(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_jsonl::<LogLine>(path)?
        .into_iter()
        .map(|(line, l)| {
            l.check().map_err(|message| HabitatError::Parse {
                path: path.to_path_buf(),
                line,
                message,
            })?;
            Ok(l.into_record())
        })
        .collect()
}

/// Metrics for a set of prediction logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Every record pooled into one report.
    pub pooled: MetricsReport,
    pub per_fold: BTreeMap<usize, MetricsReport>,
    /// Mean and population standard deviation across folds.
    pub across_folds: AggregateReport,
    /// Counts summed over every fold.
    pub confusion: ConfusionMatrix,
}

pub fn evaluate_records(records: &[PredictionRecord], taxonomy: &ClassTaxonomy) -> Result<Evaluation> {
    let mut by_fold: BTreeMap<usize, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_fold.entry(r.fold).or_default().push(r.clone());
    }
    let per_fold = by_fold
        .iter()
        .map(|(f, rs)| Ok((*f, metrics_report(rs, taxonomy)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let reports: Vec<MetricsReport> = per_fold.values().cloned().collect();
    Ok(Evaluation {
        pooled: metrics_report(records, taxonomy)?,
        across_folds: aggregate_folds(&reports)?,
        per_fold,
        confusion: confusion_matrix(records, taxonomy)?,
    })
}

/// Plain-text table: per-class precision, recall and F1 averaged over
/// folds, followed by the headline accuracies.
pub fn render_table(eval: &Evaluation, taxonomy: &ClassTaxonomy) -> String {
    let agg = &eval.across_folds;
    let width = taxonomy
        .abbreviations()
        .map(str::len)
        .max()
        .unwrap_or(5)
        .max("Class".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>15}  {:>15}  {:>15}",
        "Class", "Precision", "Recall", "F1-Score"
    );
    let fmt = |m: habitat_core::metrics::MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
    for class in taxonomy.classes() {
        if let Some(c) = agg.per_class.get(&class.abbreviation) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>15}  {:>15}  {:>15}",
                class.abbreviation,
                fmt(c.precision),
                fmt(c.recall),
                fmt(c.f1)
            );
        }
    }
    let _ = writeln!(
        out,
        "{:<width$}  {:>15}  {:>15}  {:>15}",
        "Mean",
        fmt(agg.mean_precision),
        fmt(agg.mean_recall),
        fmt(agg.mean_f1)
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "folds: {}  images: {}", agg.n_reports, eval.pooled.support);
    let _ = writeln!(
        out,
        "top-1 accuracy: {:.4} (per fold {:.4} ± {:.4})",
        eval.pooled.top1_accuracy, agg.top1_accuracy.mean, agg.top1_accuracy.std
    );
    let _ = writeln!(
        out,
        "top-3 accuracy: {:.4} (per fold {:.4} ± {:.4})",
        eval.pooled.top3_accuracy, agg.top3_accuracy.mean, agg.top3_accuracy.std
    );
    if eval.pooled.loss_support > 0 {
        let _ = writeln!(out, "validation loss: {:.4}", eval.pooled.val_loss);
    }
    out
}

/// Renders the top-3 ranking of one record with 4-decimal probabilities.
pub fn format_top3(record: &PredictionRecord) -> String {
    record
        .top3
        .iter()
        .map(|l| format!("{} {:.4}", l.abbreviation, l.probability))
        .collect::<Vec<_>>()
        .join(", ")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Row-normalised heatmap of the confusion matrix as a standalone SVG.
/// Cells show raw counts; colour encodes the share of the true class.
pub fn confusion_svg(cm: &ConfusionMatrix, taxonomy: &ClassTaxonomy) -> String {
    const CELL: usize = 36;
    const MARGIN: usize = 90;
    let k = cm.n_classes();
    let size = MARGIN + k * CELL + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="14" text-anchor="middle" font-size="12">Predicted</text>"#,
        MARGIN + k * CELL / 2
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{y}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {y})">True</text>"#,
        y = MARGIN + k * CELL / 2
    );
    let labels: Vec<String> = taxonomy.abbreviations().map(xml_escape).collect();
    for (i, label) in labels.iter().enumerate().take(k) {
        let c = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{c}" y="{y}" text-anchor="start" transform="rotate(-60 {c} {y})">{label}</text>"#,
            y = MARGIN - 6
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" text-anchor="end">{label}</text>"#,
            x = MARGIN - 6,
            y = c + 4
        );
    }
    for r in 0..k {
        let row_total = cm.row_sum(r).max(1) as f64;
        for c in 0..k {
            let n = cm.get(r, c);
            let share = n as f64 / row_total;
            let shade = (255.0 * (1.0 - share)).round() as u8;
            let (x, y) = (MARGIN + c * CELL, MARGIN + r * CELL);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="#ccc"><title>{} → {}: {n}</title></rect>"##,
                labels.get(r).map_or("", String::as_str),
                labels.get(c).map_or("", String::as_str)
            );
            if n > 0 {
                let ink = if share > 0.5 { "white" } else { "black" };
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{n}</text>"#,
                    x + CELL / 2,
                    y + CELL / 2 + 4
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const CONFUSION_SVG: &str = "confusion.svg";
pub const CONFUSION_CSV: &str = "confusion.csv";

pub fn write_confusion_csv(cm: &ConfusionMatrix, taxonomy: &ClassTaxonomy, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<&str> = std::iter::once("true\\predicted").chain(taxonomy.abbreviations()).collect();
    w.write_record(&header)?;
    for (r, abbr) in taxonomy.abbreviations().enumerate() {
        let mut row = vec![abbr.to_string()];
        row.extend(cm.row(r).iter().map(u64::to_string));
        w.write_record(&row)?;
    }
    w.flush().at(path)
}

/// Writes the JSON report, text table, heatmap and confusion counts to
/// `dir`; returns the written paths.
pub fn write_evaluation(eval: &Evaluation, taxonomy: &ClassTaxonomy, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    let json = dir.join(METRICS_JSON);
    std::fs::write(&json, serde_json::to_vec_pretty(eval)?).at(&json)?;
    let table = dir.join(METRICS_TABLE);
    std::fs::write(&table, render_table(eval, taxonomy)).at(&table)?;
    let svg = dir.join(CONFUSION_SVG);
    std::fs::write(&svg, confusion_svg(&eval.confusion, taxonomy)).at(&svg)?;
    let csv_path = dir.join(CONFUSION_CSV);
    write_confusion_csv(&eval.confusion, taxonomy, &csv_path)?;
    Ok(vec![json, table, svg, csv_path])
}

pub fn read_evaluation(dir: &Path) -> Result<Evaluation> {
    let path = dir.join(METRICS_JSON);
    let bytes = std::fs::read(&path).at(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use habitat_core::rng;
    use rand::Rng;

    fn tax() -> ClassTaxonomy {
        ClassTaxonomy::living_england()
    }

    fn random_records(n: usize, seed: u64) -> Vec<PredictionRecord> {
        let t = tax();
        let mut r = rng::stream(seed);
        (0..n)
            .map(|i| {
                let raw: Vec<f64> = (0..t.len()).map(|_| r.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                let p = raw.into_iter().map(|v| v / s).collect();
                let label = t.classes()[r.random_range(0..t.len())].abbreviation.clone();
                PredictionRecord::from_probabilities(format!("img{i}"), &label, p, &t, i % 5).unwrap()
            })
            .collect()
    }

    #[test]
    fn log_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let recs = random_records(100, 4);
        write_prediction_log(&recs, &path).unwrap();
        assert_eq!(read_prediction_log(&path).unwrap(), recs);
    }

    #[test]
    fn truncated_line_is_reported_with_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_prediction_log(&random_records(10, 5), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[6].len() / 2;
        lines[6].truncate(cut);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_prediction_log(&path) {
            Err(HabitatError::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_prediction_log(&path).unwrap().is_empty());
    }

    #[test]
    fn probabilities_are_optional_and_invariants_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(
            &path,
            r#"{"image_id":"a","fold":0,"true":"WAT","predicted":"WAT","top3":[{"label":"WAT","probability":0.7},{"label":"BS","probability":0.2},{"label":"SCR","probability":0.1}]}"#,
        )
        .unwrap();
        let recs = read_prediction_log(&path).unwrap();
        assert!(recs[0].probabilities.is_empty());
        std::fs::write(
            &path,
            "\n".to_string()
                + r#"{"image_id":"a","fold":0,"true":"WAT","predicted":"BS","top3":[{"label":"WAT","probability":0.7}]}"#,
        )
        .unwrap();
        assert!(matches!(read_prediction_log(&path), Err(HabitatError::Parse { line: 2, .. })));
        std::fs::write(
            &path,
            r#"{"image_id":"a","fold":0,"true":"WAT","predicted":"WAT","top3":[{"label":"WAT","probability":0.1},{"label":"BS","probability":0.2}]}"#,
        )
        .unwrap();
        assert!(read_prediction_log(&path).is_err());
    }

    #[test]
    fn evaluation_outputs() {
        let t = tax();
        let recs = random_records(60, 6);
        let eval = evaluate_records(&recs, &t).unwrap();
        assert_eq!(eval.per_fold.len(), 5);
        assert_eq!(eval.confusion.total(), 60);
        assert_eq!(eval.across_folds.n_reports, 5);
        let table = render_table(&eval, &t);
        assert!(table.starts_with("Class"));
        assert!(table.contains("F1-Score"));
        assert!(table.lines().any(|l| l.starts_with("WAT ")));
        let svg = confusion_svg(&eval.confusion, &t);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect x=").count(), 18 * 18);
        let dir = tempfile::tempdir().unwrap();
        let written = write_evaluation(&eval, &t, dir.path()).unwrap();
        assert_eq!(written.len(), 4);
        assert_eq!(read_evaluation(dir.path()).unwrap(), eval);
        let counts = std::fs::read_to_string(dir.path().join(CONFUSION_CSV)).unwrap();
        assert_eq!(counts.lines().count(), 19);
    }

    #[test]
    fn top3_renders_four_decimals() {
        let r = &random_records(1, 7)[0];
        let s = format_top3(r);
        for part in s.split(", ") {
            let p = part.split(' ').nth(1).unwrap();
            assert_eq!(p.split('.').nth(1).unwrap().len(), 4, "{s}");
        }
    }
}
