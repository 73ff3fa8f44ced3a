//! Accuracy, confusion matrices, misclassification reports and inference
//! throughput.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::mlp::{argmax, MlpError, MlpModel};
use crate::seed;
use crate::volume::gray_ppm_bytes;

/// Rows per inference batch.
pub const INFER_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("EmptyDataset: nothing to evaluate")]
    EmptyDataset,
    #[error("BadK: k={k} exceeds {classes} classes")]
    BadK { k: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] MlpError),
    #[error("IoFailure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let k = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![0; k * k],
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        let k = self.size();
        self.counts[truth * k + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.size() + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        let k = self.size();
        &self.counts[truth * k..(truth + 1) * k]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|i| self.get(i, i)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        (0..self.size())
            .map(|r| {
                let row = self.row(r);
                let sum: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if sum == 0 { 0.0 } else { c as f64 / sum as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn counts_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (r, label) in self.labels.iter().enumerate() {
            out.push_str(label);
            for c in self.row(r) {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn normalized_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(self.normalized()) {
            out.push_str(label);
            for p in row {
                let _ = write!(out, ",{p:.9}");
            }
            out.push('\n');
        }
        out
    }
}

/// `round(255 * log10(1 + 9p))`: 0 at p = 0, 255 at p = 1.
pub fn log_intensity(p: f64) -> u8 {
    let v = (1.0 + 9.0 * p.clamp(0.0, 1.0)).log10() * 255.0;
    (v + 0.5).floor().min(255.0) as u8
}

/// Row-normalized, log-scaled grayscale heatmap, one pixel per cell.
pub fn heatmap_bytes(cm: &ConfusionMatrix) -> Vec<u8> {
    let k = cm.size();
    let intensity: Vec<u8> = cm.normalized().iter().flatten().map(|&p| log_intensity(p)).collect();
    gray_ppm_bytes(k, k, &intensity)
}

/// Write the heatmap to `path` and the normalized values next to it as CSV.
pub fn confusion_heatmap(cm: &ConfusionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, heatmap_bytes(cm))?;
    fs::write(path.with_extension("csv"), cm.normalized_csv())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MisclassRecord {
    pub subject_id: String,
    pub component_index: usize,
    pub true_label: String,
    pub predicted_label: String,
    pub top: Vec<(String, f64)>,
}

impl MisclassRecord {
    /// `subject component true predicted label:p label:p ...`
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.subject_id,
            self.component_index,
            self.true_label,
            self.predicted_label,
            format_top(&self.top)
        )
    }
}

/// Space-separated `label:prob` pairs with three decimals, lower-cased.
pub fn format_top(top: &[(String, f64)]) -> String {
    top.iter()
        .map(|(l, p)| format!("{}:{p:.3}", l.to_lowercase()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// The `k` most probable classes, descending, lower class id first on ties.
pub fn topk<T: Copy + Into<f64>>(probs: &[T], labels: &[String], k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 || k > probs.len() {
        return Err(EvalError::BadK { k, classes: probs.len() });
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb): (f64, f64) = (probs[a].into(), probs[b].into());
        pb.total_cmp(&pa).then(a.cmp(&b))
    });
    Ok(order[..k]
        .iter()
        .map(|&i| (labels[i].clone(), probs[i].into()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub misclassified: Vec<MisclassRecord>,
}

impl EvalReport {
    /// Share of misclassifications whose true label is among the top-k.
    pub fn true_label_in_top(&self) -> Option<f64> {
        if self.misclassified.is_empty() {
            return None;
        }
        let hits = self
            .misclassified
            .iter()
            .filter(|r| r.top.iter().any(|(l, _)| *l == r.true_label))
            .count();
        Some(hits as f64 / self.misclassified.len() as f64)
    }

    pub fn misclass_report(&self) -> String {
        let mut out = String::from("subject\tcomponent\ttrue\tpredicted\ttop3\n");
        for r in &self.misclassified {
            out.push_str(&r.line());
            out.push('\n');
        }
        out
    }
}

/// Per-sample accuracy, confusion counts and a top-3 record per error.
pub fn evaluate(m: &MlpModel, d: &Dataset) -> Result<EvalReport> {
    if d.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if d.feature_dim != m.input_dim() {
        return Err(MlpError::DimensionMismatch {
            expected: m.input_dim(),
            got: d.feature_dim,
        }
        .into());
    }
    let k = m.num_classes();
    let mut labels = d.classes.clone();
    labels.resize_with(k.max(labels.len()), || String::from("?"));
    let mut confusion = ConfusionMatrix::new(labels.clone());
    let mut misclassified = Vec::new();
    let mut x = Vec::with_capacity(INFER_CHUNK * d.feature_dim);
    for chunk in d.samples.chunks(INFER_CHUNK) {
        x.clear();
        for s in chunk {
            x.extend_from_slice(&s.features);
        }
        let probs = m.predict_proba_batch(&x, chunk.len(), INFER_CHUNK)?;
        for (s, p) in chunk.iter().zip(probs.chunks_exact(k)) {
            let pred = argmax(p);
            confusion.add(s.class_id, pred);
            if pred != s.class_id {
                misclassified.push(MisclassRecord {
                    subject_id: s.subject_id.clone(),
                    component_index: s.component_index,
                    true_label: labels[s.class_id].clone(),
                    predicted_label: labels[pred].clone(),
                    top: topk(p, &labels[..k], 3.min(k))?,
                });
            }
        }
    }
    Ok(EvalReport {
        accuracy: confusion.trace() as f64 / confusion.total() as f64,
        confusion,
        misclassified,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub samples: usize,
    pub seconds: f64,
    pub throughput: f64,
    pub shape: String,
    pub predictions: Vec<usize>,
}

impl std::fmt::Display for BenchResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "shape={} samples={} seconds={:.4} throughput={:.1} samples/sec",
            self.shape, self.samples, self.seconds, self.throughput
        )
    }
}

/// Time infer-mode prediction of `n_samples` seeded standard-normal inputs.
/// Only the prediction loop is timed.
pub fn throughput_bench(m: &MlpModel, n_samples: usize, seed: u64) -> BenchResult {
    let d = m.input_dim();
    let k = m.num_classes();
    let n = n_samples.max(1);
    let mut rng = seed::rng(seed, &[0xbe7c]);
    let x: Vec<f32> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();

    let start = Instant::now();
    let mut predictions = Vec::with_capacity(n);
    for rows in x.chunks(INFER_CHUNK * d) {
        let logits = m.logits_batch(rows, rows.len() / d).expect("input sized to the model");
        predictions.extend(logits.chunks_exact(k).map(argmax));
    }
    let seconds = start.elapsed().as_secs_f64().max(1e-9);
    BenchResult {
        samples: n,
        seconds,
        throughput: n as f64 / seconds,
        shape: m.config.shape_string(),
        predictions,
    }
}
