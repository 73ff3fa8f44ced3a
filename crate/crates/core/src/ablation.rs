//! Layers x nodes grid search with stratified k-fold cross-validation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{stratified_kfold, Dataset, DatasetError};
use crate::mlp::{train, MlpConfig, MlpError, StopReason};
use crate::seed;
use crate::volume::gray_ppm_bytes;

pub const ABLATION_LOSS_THRESHOLD: f64 = 0.0005;
pub const DEFAULT_EPOCH_CAP: usize = 500;
/// Side of one heatmap cell in pixels.
pub const HEATMAP_CELL: usize = 16;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("EmptyDataset: nothing to cross-validate")]
    EmptyDataset,
    #[error("BadGrid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] MlpError),
    #[error("IoFailure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AblationError>;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub layer_counts: Vec<usize>,
    pub node_counts: Vec<usize>,
    pub k: usize,
    pub seed: u64,
    /// Epoch cap for folds that never reach the loss threshold.
    pub max_epochs: usize,
}

impl GridSpec {
    pub fn full_size(seed: u64) -> Self {
        GridSpec {
            layer_counts: vec![1, 2, 3],
            node_counts: vec![2, 5, 10, 20, 50, 100, 150, 200],
            k: 5,
            seed,
            max_epochs: DEFAULT_EPOCH_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_counts.is_empty() || self.node_counts.is_empty() {
            return Err(AblationError::BadGrid("empty layer or node list".into()));
        }
        if self.layer_counts.iter().chain(&self.node_counts).any(|&v| v == 0) {
            return Err(AblationError::BadGrid("layer and node counts must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(AblationError::BadGrid(format!("k={} (need >= 2)", self.k)));
        }
        if self.max_epochs == 0 {
            return Err(AblationError::BadGrid("max_epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Training config for one fold of cell `(layers, nodes)`.
    pub fn cell_config(&self, base: &MlpConfig, layers: usize, nodes: usize, fold: usize) -> MlpConfig {
        MlpConfig {
            hidden_layers: vec![nodes; layers],
            dropout_rate: 0.0,
            dropout_after_layer: 0,
            max_epochs: self.max_epochs,
            stop_loss_threshold: Some(base.stop_loss_threshold.unwrap_or(ABLATION_LOSS_THRESHOLD)),
            patience: None,
            seed: seed::derive(self.seed, &[layers as u64, nodes as u64, fold as u64]),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub layers: usize,
    pub nodes: usize,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub epochs_run: Vec<usize>,
    pub stop_reasons: Vec<StopReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyGrid {
    pub layer_counts: Vec<usize>,
    pub node_counts: Vec<usize>,
    /// Row-major: one row per layer count.
    pub cells: Vec<GridCell>,
    /// Classes with fewer than `k` samples.
    pub flagged_classes: Vec<String>,
}

impl AccuracyGrid {
    pub fn cell(&self, layers: usize, nodes: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.layers == layers && c.nodes == nodes)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layers");
        for n in &self.node_counts {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (r, l) in self.layer_counts.iter().enumerate() {
            let _ = write!(out, "{l}");
            for c in &self.cells[r * self.node_counts.len()..(r + 1) * self.node_counts.len()] {
                let _ = write!(out, ",{}", fmt4(c.mean));
            }
            out.push('\n');
        }
        out
    }

    /// Per-fold detail: accuracy, epochs and stop reason for every run.
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("layers,nodes,fold,accuracy,epochs_run,stop_reason\n");
        for c in &self.cells {
            for (f, ((a, e), s)) in c.fold_accuracies.iter().zip(&c.epochs_run).zip(&c.stop_reasons).enumerate() {
                let _ = writeln!(out, "{},{},{f},{a:.6},{e},{}", c.layers, c.nodes, s.as_str());
            }
        }
        out
    }

    /// Means mapped linearly from `[min, max]` to `[0, 255]`; a flat grid is all 0.
    pub fn heatmap_bytes(&self) -> Vec<u8> {
        let (lo, hi) = self
            .cells
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.mean), hi.max(c.mean)));
        let level = |v: f64| -> u8 {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        };
        let cols = self.node_counts.len();
        let (w, h) = (cols * HEATMAP_CELL, self.layer_counts.len() * HEATMAP_CELL);
        let mut px = vec![0u8; w * h];
        for (i, c) in self.cells.iter().enumerate() {
            let (r, col) = (i / cols, i % cols);
            let v = level(c.mean);
            for y in r * HEATMAP_CELL..(r + 1) * HEATMAP_CELL {
                px[y * w + col * HEATMAP_CELL..y * w + (col + 1) * HEATMAP_CELL].fill(v);
            }
        }
        gray_ppm_bytes(w, h, &px)
    }
}

/// Four decimals, halves rounded up.
pub fn fmt4(v: f64) -> String {
    format!("{:.4}", (v * 10_000.0 + 0.5).floor() / 10_000.0)
}

/// Train and score every (layers, nodes) cell on every fold.
///
/// `base` supplies input width, class count, learning rate, batch size and
/// weight scheme; depth, width, dropout, stopping and seed are set per cell.
pub fn run_grid(d: &Dataset, spec: &GridSpec, base: &MlpConfig) -> Result<AccuracyGrid> {
    spec.validate()?;
    if d.is_empty() {
        return Err(AblationError::EmptyDataset);
    }
    let flagged_classes: Vec<String> = d
        .class_counts()
        .iter()
        .enumerate()
        .filter(|&(_, &n)| n > 0 && n < spec.k)
        .map(|(c, _)| d.classes[c].clone())
        .collect();
    if !flagged_classes.is_empty() {
        warn!("classes with fewer than {} samples: {}", spec.k, flagged_classes.join(", "));
    }
    let folds = stratified_kfold(d, spec.k, spec.seed)?;
    let splits: Vec<(Dataset, Dataset)> = (0..spec.k)
        .map(|f| {
            let (tr, held) = folds.indices(f);
            (d.select(&tr), d.select(&held))
        })
        .collect();

    let jobs: Vec<(usize, usize)> = spec
        .layer_counts
        .iter()
        .flat_map(|&l| spec.node_counts.iter().map(move |&n| (l, n)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(layers, nodes)| {
            let mut cell = GridCell {
                layers,
                nodes,
                fold_accuracies: Vec::with_capacity(spec.k),
                mean: 0.0,
                epochs_run: Vec::with_capacity(spec.k),
                stop_reasons: Vec::with_capacity(spec.k),
            };
            for (fold, (tr, held)) in splits.iter().enumerate() {
                let cfg = spec.cell_config(base, layers, nodes, fold);
                let empty = Dataset { samples: Vec::new(), ..held.clone() };
                let (model, report) = train(&cfg, tr, &empty)?;
                cell.fold_accuracies.push(crate::mlp::accuracy(&model, held)?);
                cell.epochs_run.push(report.epochs_run);
                cell.stop_reasons.push(report.stop_reason);
            }
            cell.mean = cell.fold_accuracies.iter().sum::<f64>() / spec.k as f64;
            info!("cell L={layers} n={nodes}: mean {:.4}", cell.mean);
            Ok(cell)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AccuracyGrid {
        layer_counts: spec.layer_counts.clone(),
        node_counts: spec.node_counts.clone(),
        cells,
        flagged_classes,
    })
}

/// Write the mean-accuracy CSV, the heatmap, and a per-fold CSV beside the
/// first (`<stem>_folds.csv`).
pub fn emit_grid(g: &AccuracyGrid, csv_path: impl AsRef<Path>, heatmap_path: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    fs::write(csv_path, g.to_csv())?;
    fs::write(heatmap_path, g.heatmap_bytes())?;
    let stem = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid");
    fs::write(csv_path.with_file_name(format!("{stem}_folds.csv")), g.folds_csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::taxonomy::WeightScheme;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(per_class: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut samples = Vec::new();
        for c in 0..3 {
            for i in 0..per_class {
                let mut f = vec![0.0f32; 6];
                f[c] = 3.0;
                for v in &mut f {
                    *v += rng.random_range(-0.3f32..0.3);
                }
                samples.push(Sample {
                    features: f,
                    class_id: c,
                    subject_id: format!("s{i}"),
                    component_index: c,
                });
            }
        }
        Dataset {
            samples,
            classes: vec!["A".into(), "B".into(), "C".into()],
            feature_dim: 6,
        }
    }

    fn base() -> MlpConfig {
        MlpConfig {
            input_dim: 6,
            hidden_layers: vec![1],
            num_classes: 3,
            dropout_rate: 0.0,
            dropout_after_layer: 0,
            learning_rate: 0.05,
            batch_size: 8,
            max_epochs: 1,
            stop_loss_threshold: Some(0.05),
            patience: None,
            weight_scheme: WeightScheme::InverseFrequency,
            init_gain: 1.0,
            seed: 0,
        }
    }

    fn spec() -> GridSpec {
        GridSpec {
            layer_counts: vec![1, 2],
            node_counts: vec![2, 8],
            k: 3,
            seed: 4,
            max_epochs: 40,
        }
    }

    fn grid(means: &[f64]) -> AccuracyGrid {
        AccuracyGrid {
            layer_counts: vec![1],
            node_counts: (0..means.len()).collect(),
            cells: means
                .iter()
                .enumerate()
                .map(|(i, &m)| GridCell {
                    layers: 1,
                    nodes: i,
                    fold_accuracies: vec![m],
                    mean: m,
                    epochs_run: vec![1],
                    stop_reasons: vec![StopReason::MaxEpochs],
                })
                .collect(),
            flagged_classes: vec![],
        }
    }

    #[test]
    fn runs_full_grid_deterministically() {
        let d = toy(12);
        let g = run_grid(&d, &spec(), &base()).unwrap();
        assert_eq!(g.cells.len(), 4);
        for c in &g.cells {
            assert_eq!(c.fold_accuracies.len(), 3);
            assert!(c.fold_accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
            assert_eq!(c.mean, c.fold_accuracies.iter().sum::<f64>() / 3.0);
            assert!(c.epochs_run.iter().all(|&e| (1..=40).contains(&e)));
        }
        assert!(g.cell(1, 8).unwrap().mean >= 0.99);
        assert_eq!(g, run_grid(&d, &spec(), &base()).unwrap());
        assert!(g.flagged_classes.is_empty());
    }

    #[test]
    fn cells_do_not_depend_on_enumeration_order() {
        let d = toy(9);
        let g = run_grid(&d, &spec(), &base()).unwrap();
        let reversed = GridSpec {
            layer_counts: vec![2, 1],
            node_counts: vec![8, 2],
            ..spec()
        };
        let r = run_grid(&d, &reversed, &base()).unwrap();
        for c in &g.cells {
            assert_eq!(Some(c), r.cell(c.layers, c.nodes));
        }
    }

    #[test]
    fn flags_rare_classes() {
        let mut d = toy(6);
        d.samples.retain(|s| s.class_id != 2 || s.subject_id == "s0");
        let s = GridSpec {
            layer_counts: vec![1],
            node_counts: vec![2],
            max_epochs: 2,
            ..spec()
        };
        let g = run_grid(&d, &s, &base()).unwrap();
        assert_eq!(g.flagged_classes, vec!["C".to_string()]);
    }

    #[test]
    fn rejects_bad_input() {
        let d = toy(3);
        let empty = Dataset { samples: vec![], ..d.clone() };
        assert!(matches!(run_grid(&empty, &spec(), &base()), Err(AblationError::EmptyDataset)));
        let s = GridSpec { k: 1, ..spec() };
        assert!(matches!(run_grid(&d, &s, &base()), Err(AblationError::BadGrid(_))));
        let s = GridSpec { node_counts: vec![0], ..spec() };
        assert!(matches!(run_grid(&d, &s, &base()), Err(AblationError::BadGrid(_))));
    }

    #[test]
    fn csv_format() {
        assert_eq!(fmt4(0.98765), "0.9877");
        assert_eq!(fmt4(1.0), "1.0000");
        assert_eq!(fmt4(0.0), "0.0000");
        let mut g = grid(&[0.5; 8]);
        g.layer_counts = vec![1, 2, 3];
        g.cells = (0..24).map(|i| GridCell { layers: 1 + i / 8, ..grid(&[0.5; 8]).cells[i % 8].clone() }).collect();
        let csv = g.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("layers,0,1,2"));
        assert_eq!(csv.lines().nth(2).unwrap().split(',').count(), 9);
        let full = GridSpec::full_size(0);
        assert_eq!(full.layer_counts.len() * full.node_counts.len(), 24);
    }

    #[test]
    fn heatmap_scaling() {
        let header = b"P6\n32 16\n255\n".len();
        let flat = grid(&[0.7, 0.7]).heatmap_bytes();
        assert!(flat[header..].iter().all(|&b| b == 0));
        let img = grid(&[0.2, 0.9]).heatmap_bytes();
        assert_eq!(&img[..header], b"P6\n32 16\n255\n");
        assert_eq!(img[header], 0);
        assert_eq!(img[header + 3 * HEATMAP_CELL], 255);
    }

    #[test]
    fn emit_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(&[0.25, 0.5]);
        emit_grid(&g, dir.path().join("grid.csv"), dir.path().join("grid.ppm")).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("grid.csv")).unwrap(), g.to_csv());
        assert!(dir.path().join("grid.ppm").exists());
        assert_eq!(fs::read_to_string(dir.path().join("grid_folds.csv")).unwrap().lines().count(), 3);
    }
}
