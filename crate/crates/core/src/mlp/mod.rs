//! Fully connected classifier: ReLU hidden layers, optional inverted dropout
//! after one hidden layer, softmax output and class-weighted cross-entropy.
//!
//! The network is generic over [`Real`] so gradient checks can run in `f64`;
//! trained models are `f32` ([`MlpModel`]).

mod io;
mod real;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::seed;
use crate::taxonomy::WeightScheme;

pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use real::Real;
use real::{gemm, View};
pub use train::{train, EpochMetrics, StopReason, TrainReport};
pub(crate) use train::accuracy;

/// Probability floor inside the log of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("BadConfig: {0}")]
    BadConfig(String),
    #[error("DimensionMismatch: expected input of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("BadClass: class {class} outside 0..{num_classes}")]
    BadClass { class: usize, num_classes: usize },
    #[error("EmptyDataset: {0}")]
    EmptyDataset(String),
    #[error("BadMagic: model file does not start with RSNM")]
    BadMagic,
    #[error("VersionMismatch: model format version {0} is not supported")]
    VersionMismatch(u32),
    #[error("TruncatedFile: model file ends early")]
    TruncatedFile,
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("IoFailure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MlpError>;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
    /// Drop probability.
    pub dropout_rate: f64,
    /// 1-based hidden layer whose output is dropped; 0 disables dropout.
    pub dropout_after_layer: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stop_loss_threshold: Option<f64>,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub weight_scheme: WeightScheme,
    /// Multiplier on the He-normal standard deviation of every layer.
    pub init_gain: f64,
    pub seed: u64,
}

impl MlpConfig {
    /// Three hidden layers of 200, 66% dropout after the second, lr 1e-5.
    pub fn full_size(input_dim: usize, num_classes: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden_layers: vec![200, 200, 200],
            num_classes,
            dropout_rate: 0.66,
            dropout_after_layer: 2,
            learning_rate: 1e-5,
            batch_size: 32,
            max_epochs: 100,
            stop_loss_threshold: None,
            patience: None,
            weight_scheme: WeightScheme::InverseFrequency,
            init_gain: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MlpError::BadConfig(m));
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad(format!("input_dim={} num_classes={}", self.input_dim, self.num_classes));
        }
        if self.hidden_layers.contains(&0) {
            return bad(format!("hidden widths {:?} must be >= 1", self.hidden_layers));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.dropout_after_layer > self.hidden_layers.len() {
            return bad(format!(
                "dropout_after_layer {} exceeds {} hidden layers",
                self.dropout_after_layer,
                self.hidden_layers.len()
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.init_gain > 0.0) || !self.init_gain.is_finite() {
            return bad(format!("init_gain {} must be finite and > 0", self.init_gain));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden_layers);
        w.push(self.num_classes);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// e.g. `109350-200-200-200-58`
    pub fn shape_string(&self) -> String {
        self.widths().iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-")
    }

    fn dropout_active(&self) -> bool {
        self.dropout_after_layer > 0 && self.dropout_rate > 0.0
    }
}

/// Dense layer, `weights` is `fan_out x fan_in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub config: MlpConfig,
    pub layers: Vec<Layer<T>>,
}

pub type MlpModel = Mlp<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub batch: usize,
    /// Output of each hidden layer after ReLU (and dropout where applied).
    pub hidden: Vec<Vec<T>>,
    /// Dropout multipliers (0 or 1/(1-p)) for the dropped layer.
    pub mask: Option<Vec<T>>,
    /// `batch x num_classes`.
    pub logits: Vec<T>,
}

/// Same shapes as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(m: &Mlp<T>) -> Self {
        Gradients {
            layers: m
                .layers
                .iter()
                .map(|l| Layer {
                    fan_in: l.fan_in,
                    fan_out: l.fan_out,
                    weights: vec![T::zero(); l.weights.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    /// Parameter `i` in the flat order of [`Mlp::param`].
    pub fn get(&self, i: usize) -> T {
        flat_get(&self.layers, i)
    }
}

/// Loss, gradients and bookkeeping from one training batch.
#[derive(Debug, Clone)]
pub struct Backprop<T> {
    pub loss: T,
    pub grads: Gradients<T>,
    pub correct: usize,
}

fn flat_locate<T>(layers: &[Layer<T>], mut i: usize) -> (usize, bool, usize) {
    for (l, layer) in layers.iter().enumerate() {
        if i < layer.weights.len() {
            return (l, false, i);
        }
        i -= layer.weights.len();
        if i < layer.bias.len() {
            return (l, true, i);
        }
        i -= layer.bias.len();
    }
    panic!("parameter index out of range");
}

fn flat_get<T: Copy>(layers: &[Layer<T>], i: usize) -> T {
    let (l, bias, j) = flat_locate(layers, i);
    if bias {
        layers[l].bias[j]
    } else {
        layers[l].weights[j]
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<T: Real>(z: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in z.iter_mut() {
        *v *= inv;
    }
}

/// `-w[true] * ln(max(p[true], 1e-12))`.
pub fn weighted_ce<T: Real>(probs: &[T], true_class: usize, class_weights: &[T]) -> Result<T> {
    if true_class >= probs.len() || true_class >= class_weights.len() {
        return Err(MlpError::BadClass {
            class: true_class,
            num_classes: probs.len(),
        });
    }
    let p = probs[true_class].max(T::lit(PROB_FLOOR));
    Ok(-class_weights[true_class] * p.ln())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Mlp<T> {
    /// He-normal weights (sd = init_gain * sqrt(2 / fan_in)), zero biases,
    /// drawn from the config seed.
    pub fn init(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, &[0x1417]);
        let layers = config
            .widths()
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let normal = Normal::new(0.0, config.init_gain * (2.0 / fan_in as f64).sqrt()).unwrap();
                Layer {
                    fan_in,
                    fan_out,
                    weights: (0..fan_in * fan_out).map(|_| T::lit(normal.sample(&mut rng))).collect(),
                    bias: vec![T::zero(); fan_out],
                }
            })
            .collect();
        Ok(Mlp {
            config: config.clone(),
            layers,
        })
    }

    /// Model with every parameter zero.
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        let mut m = Self::init(config)?;
        for l in &mut m.layers {
            l.weights.fill(T::zero());
        }
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat parameter order: layer by layer, weights then bias.
    pub fn param(&self, i: usize) -> T {
        flat_get(&self.layers, i)
    }

    pub fn set_param(&mut self, i: usize, v: T) {
        let (l, bias, j) = flat_locate(&self.layers, i);
        if bias {
            self.layers[l].bias[j] = v;
        } else {
            self.layers[l].weights[j] = v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_input(&self, len: usize, batch: usize) -> Result<()> {
        let expected = self.config.input_dim * batch;
        if len != expected || batch == 0 {
            return Err(MlpError::DimensionMismatch {
                expected: self.config.input_dim,
                got: if batch == 0 { len } else { len / batch },
            });
        }
        Ok(())
    }

    /// Forward pass over a row-major `batch x input_dim` matrix.
    ///
    /// In train mode the configured dropout is applied with masks drawn from
    /// `rng`; infer mode never touches `rng`.
    pub fn forward_batch<R: Rng>(&self, x: &[T], batch: usize, mode: Mode, rng: &mut R) -> Result<ForwardCache<T>> {
        self.check_input(x.len(), batch)?;
        let n_hidden = self.layers.len() - 1;
        let mut hidden: Vec<Vec<T>> = Vec::with_capacity(n_hidden);
        let mut mask = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &hidden[l - 1][..] };
            let mut z = Vec::with_capacity(batch * layer.fan_out);
            for _ in 0..batch {
                z.extend_from_slice(&layer.bias);
            }
            gemm(
                T::one(),
                View::rm(input, batch, layer.fan_in),
                View::rm(&layer.weights, layer.fan_out, layer.fan_in).t(),
                T::one(),
                &mut z,
            );
            if l == n_hidden {
                return Ok(ForwardCache {
                    batch,
                    hidden,
                    mask,
                    logits: z,
                });
            }
            for v in z.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            if mode == Mode::Train && self.config.dropout_active() && l + 1 == self.config.dropout_after_layer {
                let keep = 1.0 - self.config.dropout_rate;
                let scale = T::lit(1.0 / keep);
                let m: Vec<T> = (0..z.len())
                    .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                for (v, &k) in z.iter_mut().zip(&m) {
                    *v *= k;
                }
                mask = Some(m);
            }
            hidden.push(z);
        }
        unreachable!("network has an output layer")
    }

    /// Single-sample forward pass returning logits.
    pub fn forward<R: Rng>(&self, x: &[T], mode: Mode, rng: &mut R) -> Result<ForwardCache<T>> {
        self.forward_batch(x, 1, mode, rng)
    }

    /// Infer-mode logits for a batch.
    pub fn logits_batch(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        Ok(self.forward_batch(x, batch, Mode::Infer, &mut NoRng)?.logits)
    }

    /// Mean class-weighted cross-entropy over the batch and its exact
    /// gradient, backpropagated through the dropout masks drawn here.
    pub fn backward<R: Rng>(&self, x: &[T], labels: &[usize], class_weights: &[T], mode: Mode, rng: &mut R) -> Result<Backprop<T>> {
        let batch = labels.len();
        if batch == 0 {
            return Err(MlpError::EmptyDataset("empty batch".into()));
        }
        let k = self.config.num_classes;
        if class_weights.len() != k {
            return Err(MlpError::ShapeMismatch(format!(
                "{} class weights for {k} classes",
                class_weights.len()
            )));
        }
        if let Some(&class) = labels.iter().find(|&&c| c >= k) {
            return Err(MlpError::BadClass { class, num_classes: k });
        }
        let cache = self.forward_batch(x, batch, mode, rng)?;

        let inv_b = T::one() / T::lit(batch as f64);
        let floor = T::lit(PROB_FLOOR);
        let mut loss = T::zero();
        let mut correct = 0;
        let mut delta = cache.logits.clone();
        for (row, &y) in delta.chunks_exact_mut(k).zip(labels) {
            if argmax(row) == y {
                correct += 1;
            }
            softmax_in_place(row);
            let w = class_weights[y];
            let p = row[y];
            loss += -w * p.max(floor).ln();
            if p < floor {
                // clamped region: loss is locally constant
                row.fill(T::zero());
                continue;
            }
            row[y] -= T::one();
            let s = w * inv_b;
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        loss *= inv_b;

        let mut grads = Gradients::zeros_like(self);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = if l == 0 { x } else { &cache.hidden[l - 1][..] };
            let g = &mut grads.layers[l];
            gemm(
                T::one(),
                View::rm(&delta, batch, layer.fan_out).t(),
                View::rm(input, batch, layer.fan_in),
                T::zero(),
                &mut g.weights,
            );
            for row in delta.chunks_exact(layer.fan_out) {
                for (b, &d) in g.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![T::zero(); batch * layer.fan_in];
            gemm(
                T::one(),
                View::rm(&delta, batch, layer.fan_out),
                View::rm(&layer.weights, layer.fan_out, layer.fan_in),
                T::zero(),
                &mut prev,
            );
            // ReLU: the stored activation is positive exactly where the unit
            // was active (and kept, when dropout applied).
            let act = &cache.hidden[l - 1];
            let dropped_here = l == self.config.dropout_after_layer;
            match (&cache.mask, dropped_here) {
                (Some(mask), true) => {
                    for ((d, &a), &m) in prev.iter_mut().zip(act).zip(mask) {
                        *d = if a > T::zero() { *d * m } else { T::zero() };
                    }
                }
                _ => {
                    for (d, &a) in prev.iter_mut().zip(act) {
                        if a <= T::zero() {
                            *d = T::zero();
                        }
                    }
                }
            }
            delta = prev;
        }
        Ok(Backprop { loss, grads, correct })
    }

    /// Plain SGD: `theta -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weights.len() != l.weights.len() || g.bias.len() != l.bias.len())
        {
            return Err(MlpError::ShapeMismatch("gradient shapes differ from the model".into()));
        }
        let lr = T::lit(lr);
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, &d) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= lr * d;
            }
            for (b, &d) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
        }
        Ok(())
    }

    /// Infer-mode class and probabilities for one input.
    pub fn predict(&self, x: &[T]) -> Result<(usize, Vec<T>)> {
        let logits = self.logits_batch(x, 1)?;
        let probs = softmax(&logits);
        Ok((argmax(&probs), probs))
    }

    /// Row-major `n x num_classes` probabilities for `n` stacked inputs,
    /// processed in chunks of `chunk` rows.
    pub fn predict_proba_batch(&self, x: &[T], n: usize, chunk: usize) -> Result<Vec<T>> {
        self.check_input(x.len(), n.max(1))?;
        let d = self.config.input_dim;
        let k = self.config.num_classes;
        let mut out = Vec::with_capacity(n * k);
        for rows in x.chunks(chunk.max(1) * d) {
            let mut logits = self.logits_batch(rows, rows.len() / d)?;
            for r in logits.chunks_exact_mut(k) {
                softmax_in_place(r);
            }
            out.extend_from_slice(&logits);
        }
        Ok(out)
    }
}

/// Stand-in generator for infer mode, which never draws.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("infer mode draws no random numbers")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("infer mode draws no random numbers")
    }

    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("infer mode draws no random numbers")
    }
}
