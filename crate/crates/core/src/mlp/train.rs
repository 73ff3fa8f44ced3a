use std::fmt::Write as _;

use log::debug;
use rand::seq::SliceRandom;

use super::{argmax, MlpConfig, MlpError, MlpModel, Mode, Result};
use crate::dataset::Dataset;
use crate::seed;
use crate::taxonomy::class_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    LossThreshold,
    MaxEpochs,
    ValPlateau,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::LossThreshold => "loss_threshold",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::ValPlateau => "val_plateau",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean class-weighted loss over the epoch's training samples.
    pub train_loss: f64,
    /// Accuracy of the train-mode predictions made during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub stop_reason: StopReason,
    pub epochs_run: usize,
    /// Epoch (1-based) whose weights were returned.
    pub best_epoch: usize,
    pub batch_size: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_accuracy,val_accuracy\n");
        for e in &self.epochs {
            let val = e.val_accuracy.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.8},{:.6},{}", e.epoch, e.train_loss, e.train_accuracy, val);
        }
        out
    }

    pub fn final_train_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_accuracy)
    }
}

fn gather(d: &Dataset, idx: &[usize], x: &mut Vec<f32>, y: &mut Vec<usize>) {
    x.clear();
    y.clear();
    for &i in idx {
        x.extend_from_slice(&d.samples[i].features);
        y.push(d.samples[i].class_id);
    }
}

pub(crate) fn accuracy(m: &MlpModel, d: &Dataset) -> Result<f64> {
    const CHUNK: usize = 256;
    let mut correct = 0;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let all: Vec<usize> = (0..d.len()).collect();
    for idx in all.chunks(CHUNK) {
        gather(d, idx, &mut x, &mut y);
        let logits = m.logits_batch(&x, idx.len())?;
        correct += logits
            .chunks_exact(m.num_classes())
            .zip(&y)
            .filter(|(row, &c)| argmax(row) == c)
            .count();
    }
    Ok(correct as f64 / d.len().max(1) as f64)
}

/// Mini-batch SGD with seeded shuffling.
///
/// Stops when the epoch mean loss drops below `stop_loss_threshold`, when
/// validation accuracy has not improved for `patience` epochs, or after
/// `max_epochs`. With a non-empty validation set the returned model is the
/// best-validation snapshot (later epoch on ties); otherwise the last one.
pub fn train(config: &MlpConfig, train_set: &Dataset, val_set: &Dataset) -> Result<(MlpModel, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(MlpError::EmptyDataset("training set is empty".into()));
    }
    for d in [train_set, val_set] {
        if !d.is_empty() && d.feature_dim != config.input_dim {
            return Err(MlpError::DimensionMismatch {
                expected: config.input_dim,
                got: d.feature_dim,
            });
        }
        if let Some(s) = d.samples.iter().find(|s| s.class_id >= config.num_classes) {
            return Err(MlpError::BadClass {
                class: s.class_id,
                num_classes: config.num_classes,
            });
        }
    }

    let mut counts = train_set.class_counts();
    counts.resize(config.num_classes, 0);
    let weights: Vec<f32> = class_weights(&counts, config.weight_scheme)
        .map_err(|e| MlpError::BadConfig(e.to_string()))?
        .into_iter()
        .map(|w| w as f32)
        .collect();

    let mut model = MlpModel::init(config)?;
    let mut shuffle_rng = seed::rng(config.seed, &[0x5bff]);
    let mut dropout_rng = seed::rng(config.seed, &[0xd40f]);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut x = Vec::with_capacity(config.batch_size * config.input_dim);
    let mut y = Vec::with_capacity(config.batch_size);

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, MlpModel)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for idx in order.chunks(config.batch_size) {
            gather(train_set, idx, &mut x, &mut y);
            let bp = model.backward(&x, &y, &weights, Mode::Train, &mut dropout_rng)?;
            loss_sum += bp.loss as f64 * idx.len() as f64;
            correct += bp.correct;
            model.sgd_step(&bp.grads, config.learning_rate)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(accuracy(&model, val_set)?)
        };
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
        });
        debug!("epoch {epoch}: loss {train_loss:.6} val {val_accuracy:?}");

        if let Some(v) = val_accuracy {
            let best_val = best.as_ref().map(|(b, _, _)| *b);
            if best_val.is_none_or(|b| v > b) {
                since_best = 0;
            } else {
                since_best += 1;
            }
            if best_val.is_none_or(|b| v >= b) {
                best = Some((v, epoch, model.clone()));
            }
        }

        if config.stop_loss_threshold.is_some_and(|t| train_loss < t) {
            stop_reason = StopReason::LossThreshold;
            break;
        }
        if config.patience.is_some_and(|p| since_best >= p) {
            stop_reason = StopReason::ValPlateau;
            break;
        }
    }

    let epochs_run = epochs.len();
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, epochs_run),
    };
    Ok((
        model,
        TrainReport {
            epochs,
            stop_reason,
            epochs_run,
            best_epoch,
            batch_size: config.batch_size,
        },
    ))
}
