//! Confusion matrices, accuracy, adjacent-step misclassification, threshold
//! sweeps and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use crate::embednet::{EmbeddingVector, Parameters, Scalar};
use crate::error::{Error, Result};
use crate::inference::{embed_all, nearest_neighbors, vote, Gallery};
use crate::labeled::{Label, LabeledImage};

/// Counts indexed `[truth][predicted]` over the labels `Step(1)..=Step(n), Error`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<Label>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_steps: usize) -> Self {
        let mut labels: Vec<Label> = (1..=n_steps as u16).map(Label::Step).collect();
        labels.push(Label::Error);
        let k = labels.len();
        Self {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn index_of(&self, label: Label) -> Result<usize> {
        match label {
            Label::Step(s) if s >= 1 && (s as usize) <= self.n_steps() => Ok(s as usize - 1),
            Label::Error => Ok(self.n_steps()),
            _ => Err(Error::Domain(format!(
                "label {label} is outside the label set (steps 1..={}, error)",
                self.n_steps()
            ))),
        }
    }

    pub fn add(&mut self, truth: Label, predicted: Label) -> Result<()> {
        let (t, p) = (self.index_of(truth)?, self.index_of(predicted)?);
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    /// Row-stochastic view; rows without samples stay all-zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    /// Counts table followed by the normalized table, separated by a blank line.
    pub fn to_csv(&self) -> String {
        let header = std::iter::once("truth\\predicted".to_string())
            .chain(self.labels.iter().map(Label::to_string))
            .collect::<Vec<_>>()
            .join(",");
        let mut out = format!("{header}\n");
        for (l, row) in self.labels.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "{l},{}", cells.join(",")).unwrap();
        }
        writeln!(out, "\n{header}").unwrap();
        for (l, row) in self.labels.iter().zip(self.normalized()) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(out, "{l},{}", cells.join(",")).unwrap();
        }
        out
    }
}

pub fn confusion_matrix(n_steps: usize, predictions: &[(Label, Label)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(n_steps);
    for &(t, p) in predictions {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// Trace over total.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Domain("accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.labels.len()).map(|i| cm.counts[i][i]).sum();
    Ok(trace as f64 / total as f64)
}

/// Fraction of step-labeled truths predicted as the immediately preceding or
/// following step. Error truths are left out of the denominator.
pub fn adjacent_misclassification_rate(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.n_steps();
    let denom: u64 = (0..n).map(|t| cm.row_total(t)).sum();
    if denom == 0 {
        return Err(Error::Domain("no step-labeled truths".into()));
    }
    let mut adj = 0;
    for t in 0..n {
        if t > 0 {
            adj += cm.counts[t][t - 1];
        }
        if t + 1 < n {
            adj += cm.counts[t][t + 1];
        }
    }
    Ok(adj as f64 / denom as f64)
}

/// Fraction of Error truths predicted as Error; `None` without Error truths.
pub fn error_recall(cm: &ConfusionMatrix) -> Option<f64> {
    let e = cm.n_steps();
    let row = cm.row_total(e);
    (row > 0).then(|| cm.counts[e][e] as f64 / row as f64)
}

/// Fraction of step-labeled truths predicted as Error; `None` without step truths.
pub fn false_error_rate(cm: &ConfusionMatrix) -> Option<f64> {
    let e = cm.n_steps();
    let denom: u64 = (0..e).map(|t| cm.row_total(t)).sum();
    let rejected: u64 = (0..e).map(|t| cm.counts[t][e]).sum();
    (denom > 0).then(|| rejected as f64 / denom as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub accuracy: f64,
    /// NaN when the test set has no Error images.
    pub error_recall: f64,
    pub false_error_rate: f64,
    pub adjacent_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,accuracy,error_recall,false_error_rate,adjacent_rate\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.threshold, r.accuracy, r.error_recall, r.false_error_rate, r.adjacent_rate
            )
            .unwrap();
        }
        out
    }

    /// First row meeting both bounds, preferring the highest accuracy.
    pub fn operating_point(&self, min_recall: f64, max_false_error: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.error_recall >= min_recall && r.false_error_rate <= max_false_error)
            .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
    }
}

/// Sweep over precomputed query embeddings: the k nearest neighbors are found
/// once per query and re-voted for every threshold.
pub fn sweep_from_embeddings(
    gallery: &Gallery,
    queries: &[(Label, EmbeddingVector)],
    k: usize,
    thresholds: &[f64],
    n_steps: usize,
) -> Result<SweepReport> {
    if thresholds.iter().any(|t| t.is_nan()) {
        return Err(Error::Domain("threshold is NaN".into()));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("thresholds must be strictly increasing".into()));
    }
    let neighbors = queries
        .iter()
        .map(|(_, q)| nearest_neighbors(gallery, q, k))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut cm = ConfusionMatrix::new(n_steps);
        for ((truth, _), nb) in queries.iter().zip(&neighbors) {
            cm.add(*truth, vote(gallery, nb, Some(t)).predicted)?;
        }
        rows.push(SweepRow {
            threshold: t,
            accuracy: overall_accuracy(&cm)?,
            error_recall: error_recall(&cm).unwrap_or(f64::NAN),
            false_error_rate: false_error_rate(&cm).unwrap_or(f64::NAN),
            adjacent_rate: adjacent_misclassification_rate(&cm).unwrap_or(f64::NAN),
        });
    }
    Ok(SweepReport { rows })
}

/// Fraction of clean validation queries a calibrated threshold keeps.
pub const DEFAULT_KEEP_QUANTILE: f64 = 0.95;

/// Rejection threshold from clean held-out data: the nearest-rank `quantile`
/// of the queries' mean k-NN distances. No anomalous images are needed.
pub fn calibrate_threshold(gallery: &Gallery, clean: &[EmbeddingVector], k: usize, quantile: f64) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::Domain("no calibration queries".into()));
    }
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::Domain(format!("quantile must be in (0, 1], got {quantile}")));
    }
    let mut d = clean
        .iter()
        .map(|q| Ok(vote(gallery, &nearest_neighbors(gallery, q, k)?, None).mean_knn_distance))
        .collect::<Result<Vec<f64>>>()?;
    d.sort_by(f64::total_cmp);
    let rank = ((quantile * d.len() as f64).ceil() as usize).clamp(1, d.len());
    Ok(d[rank - 1])
}

/// Embeds `test_images` once and evaluates every threshold.
pub fn threshold_sweep<T: Scalar>(
    params: &Parameters<T>,
    gallery: &Gallery,
    test_images: &[LabeledImage],
    k: usize,
    thresholds: &[f64],
    n_steps: usize,
) -> Result<SweepReport> {
    let embs = embed_all(params, test_images)?;
    let queries: Vec<_> = test_images.iter().map(|i| i.label).zip(embs).collect();
    sweep_from_embeddings(gallery, &queries, k, thresholds, n_steps)
}

/// Plain-text run summary.
pub fn summary_text(cm: &ConfusionMatrix, threshold: Option<f64>) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "images: {}", cm.total()).unwrap();
    writeln!(s, "accuracy: {:.4}", overall_accuracy(cm)?).unwrap();
    match adjacent_misclassification_rate(cm) {
        Ok(a) => writeln!(s, "adjacent_misclassification_rate: {a:.4}").unwrap(),
        Err(_) => writeln!(s, "adjacent_misclassification_rate: n/a").unwrap(),
    }
    if let Some(r) = error_recall(cm) {
        writeln!(s, "error_recall: {r:.4}").unwrap();
    }
    if let Some(r) = false_error_rate(cm) {
        writeln!(s, "false_error_rate: {r:.4}").unwrap();
    }
    match threshold {
        Some(t) => writeln!(s, "threshold: {t}").unwrap(),
        None => writeln!(s, "threshold: none").unwrap(),
    }
    Ok(s)
}

/// Writes `id,label,v_0..v_{D-1}` with shortest round-trip float formatting.
pub fn export_embeddings<T: Scalar>(params: &Parameters<T>, images: &[LabeledImage], path: &Path) -> Result<()> {
    let embs = embed_all(params, images)?;
    let rows: Vec<_> = images.iter().zip(&embs).map(|(i, e)| (i.id.as_str(), i.label, e.0.as_slice())).collect();
    write_embeddings_csv(&rows, params.arch.embed_dim, path)
}

pub fn write_embeddings_csv(rows: &[(&str, Label, &[f64])], dim: usize, path: &Path) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = ["id".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..dim).map(|i| format!("v_{i}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (id, label, v) in rows {
        let rec: Vec<String> = [id.to_string(), label.to_string()]
            .into_iter()
            .chain(v.iter().map(f64::to_string))
            .collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn import_embeddings(path: &Path) -> Result<Vec<(String, Label, Vec<f64>)>> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let id = rec.get(0).ok_or_else(|| Error::format(path, "missing id"))?.to_string();
        let label: Label = rec.get(1).ok_or_else(|| Error::format(path, "missing label"))?.parse()?;
        let v = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad value {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((id, label, v));
    }
    Ok(out)
}
