//! Compact 1D convolutional classifier over renormalized spectra.
//!
//! The layer stack is
//!
//! ```text
//! conv(7, 16) -> relu -> maxpool(4) -> conv(5, 32) -> relu -> maxpool(4) -> flatten
//!   -> dense(128) -> relu -> dropout -> dense(64) -> relu -> dense(3) -> softmax
//! ```
//!
//! Weights are stored and trained as `f32`. The forward and backward passes
//! are generic over the float type so [`gradient_check`] can rerun the exact
//! same arithmetic in `f64`.

use std::fmt::Write as _;
use std::fs;
use std::ops::AddAssign;
use std::path::Path;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{LabeledDataset, Split};
use crate::signal_io::MachiningClass;
use crate::synth::mix_seed;

pub const MODEL_MAGIC: &[u8; 4] = b"CHMD";
pub const MODEL_VERSION: u32 = 1;

pub const N_INPUTS: usize = 1024;
pub const N_CLASSES: usize = 3;

/// Floor of the probability inside the cross-entropy logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("WrongInputLength: expected {expected} values, got {got}")]
    WrongInputLength { expected: usize, got: usize },
    #[error("MissingClass: no {0} samples in the training split")]
    MissingClass(MachiningClass),
    #[error("EmptyDataset: {0}")]
    EmptyDataset(String),
    #[error("InvalidHyperparameters: {0}")]
    InvalidHyperparameters(String),
    #[error("CorruptModel: {0}")]
    CorruptModel(String),
    #[error("IoFailure: {0}")]
    IoFailure(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    /// Valid (unpadded) stride-1 convolution over `(channels, length)` input.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    /// Non-overlapping max pooling; a trailing partial window is discarded.
    MaxPool {
        size: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Inverted dropout, active only in training mode.
    Dropout {
        rate: f32,
    },
    Softmax,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * in_channels * kernel + out_channels,
            Layer::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }

    /// Output `(channels, length)` for an input shape, or why it does not fit.
    pub fn output_shape(&self, (channels, len): (usize, usize)) -> Result<(usize, usize), String> {
        match *self {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if channels != in_channels {
                    return Err(format!(
                        "conv expects {in_channels} channels, got {channels}"
                    ));
                }
                if kernel == 0 || kernel > len {
                    return Err(format!("conv kernel {kernel} does not fit length {len}"));
                }
                Ok((out_channels, len - kernel + 1))
            }
            Layer::MaxPool { size } => {
                if size == 0 || size > len {
                    return Err(format!("pool size {size} does not fit length {len}"));
                }
                Ok((channels, len / size))
            }
            Layer::Flatten => Ok((1, channels * len)),
            Layer::Dense { inputs, outputs } => {
                if channels * len != inputs {
                    return Err(format!(
                        "dense expects {inputs} inputs, got {}",
                        channels * len
                    ));
                }
                Ok((1, outputs))
            }
            Layer::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok((channels, len))
            }
            Layer::Relu | Layer::Softmax => Ok((channels, len)),
        }
    }
}

/// The standard layer stack for `n_inputs` spectral lines.
pub fn default_architecture(n_inputs: usize, dropout_rate: f32) -> Vec<Layer> {
    let after_conv1 = (n_inputs - 7 + 1) / 4;
    let after_conv2 = (after_conv1 - 5 + 1) / 4;
    vec![
        Layer::Conv1d {
            in_channels: 1,
            out_channels: 16,
            kernel: 7,
        },
        Layer::Relu,
        Layer::MaxPool { size: 4 },
        Layer::Conv1d {
            in_channels: 16,
            out_channels: 32,
            kernel: 5,
        },
        Layer::Relu,
        Layer::MaxPool { size: 4 },
        Layer::Flatten,
        Layer::Dense {
            inputs: 32 * after_conv2,
            outputs: 128,
        },
        Layer::Relu,
        Layer::Dropout { rate: dropout_rate },
        Layer::Dense {
            inputs: 128,
            outputs: 64,
        },
        Layer::Relu,
        Layer::Dense {
            inputs: 64,
            outputs: N_CLASSES,
        },
        Layer::Softmax,
    ]
}

/// Checks that `layers` chain from `(1, n_inputs)` to a softmax over the classes.
pub fn validate_architecture(layers: &[Layer], n_inputs: usize) -> Result<(), String> {
    let mut shape = (1, n_inputs);
    for (i, layer) in layers.iter().enumerate() {
        shape = layer
            .output_shape(shape)
            .map_err(|e| format!("layer {i}: {e}"))?;
        if matches!(layer, Layer::Softmax) && i + 1 != layers.len() {
            return Err("softmax must be the last layer".into());
        }
    }
    if layers.last() != Some(&Layer::Softmax) {
        return Err("last layer must be softmax".into());
    }
    if shape != (1, N_CLASSES) {
        return Err(format!(
            "network ends with shape {shape:?}, expected (1, {N_CLASSES})"
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub dropout_rate: f32,
    /// RMSprop decay of the squared-gradient average.
    pub rho: f32,
    pub epsilon: f32,
    pub rng_seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            batch_size: 2,
            learning_rate: 0.0001,
            epochs: 30,
            dropout_rate: 0.3,
            rho: 0.9,
            epsilon: 1e-7,
            rng_seed: 0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidHyperparameters(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.epsilon > 0.0) {
            return bad("rho must be in [0, 1) and epsilon positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Renders a training log as `epoch,train_loss,train_acc,val_loss,val_acc` CSV.
pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: [f64; N_CLASSES],
    pub predicted: MachiningClass,
    /// Some input value fell outside `[-crop_db, 0]`.
    pub input_out_of_range: bool,
}

impl Prediction {
    fn from_probabilities(probabilities: [f64; N_CLASSES], input_out_of_range: bool) -> Self {
        let mut best = 0;
        for c in 1..N_CLASSES {
            if probabilities[c] > probabilities[best] {
                best = c;
            }
        }
        Prediction {
            probabilities,
            predicted: MachiningClass::from_index(best).expect("class index"),
            input_out_of_range,
        }
    }
}

/// Categorical cross-entropy of one prediction.
pub fn loss(probabilities: &[f64; N_CLASSES], label: MachiningClass) -> f64 {
    -probabilities[label.index()].max(PROBABILITY_FLOOR).ln()
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    layers: Vec<Layer>,
    params: Vec<f32>,
    n_inputs: usize,
    crop_db: f32,
    seed: u64,
    dropout_rng: ChaCha8Rng,
    pub training_log: Vec<EpochLog>,
}

impl PartialEq for ClassifierModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.n_inputs == other.n_inputs
            && self.crop_db.to_bits() == other.crop_db.to_bits()
            && self.seed == other.seed
            && self.training_log == other.training_log
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Builds the default network with He-uniform weights and zero biases.
pub fn build_model(seed: u64) -> ClassifierModel {
    build_model_with(N_INPUTS, Hyperparameters::default().dropout_rate, seed)
}

pub fn build_model_with(n_inputs: usize, dropout_rate: f32, seed: u64) -> ClassifierModel {
    let layers = default_architecture(n_inputs, dropout_rate);
    validate_architecture(&layers, n_inputs).expect("default architecture chains");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(layers.iter().map(Layer::param_count).sum());
    for layer in &layers {
        let (n_weights, n_bias, fan_in) = match *layer {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => (
                out_channels * in_channels * kernel,
                out_channels,
                in_channels * kernel,
            ),
            Layer::Dense { inputs, outputs } => (outputs * inputs, outputs, inputs),
            _ => continue,
        };
        let limit = (6.0 / fan_in as f64).sqrt() as f32;
        params.extend((0..n_weights).map(|_| rng.random_range(-limit..=limit)));
        params.extend(std::iter::repeat_n(0.0f32, n_bias));
    }
    ClassifierModel {
        layers,
        params,
        n_inputs,
        crop_db: 20.0,
        seed,
        dropout_rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX)),
        training_log: Vec::new(),
    }
}

impl ClassifierModel {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn crop_db(&self) -> f32 {
        self.crop_db
    }

    /// Sets the floor used to flag out-of-range inputs.
    pub fn with_crop_db(mut self, crop_db: f32) -> Self {
        self.crop_db = crop_db;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, lines: &[f32]) -> Result<bool, ModelError> {
        if lines.len() != self.n_inputs {
            return Err(ModelError::WrongInputLength {
                expected: self.n_inputs,
                got: lines.len(),
            });
        }
        let floor = -self.crop_db;
        Ok(lines.iter().any(|v| !(floor..=0.0).contains(v)))
    }

    /// Inference-mode prediction (dropout off). Safe to share across threads.
    pub fn predict(&self, lines: &[f32]) -> Result<Prediction, ModelError> {
        let flagged = self.check_input(lines)?;
        let trace = forward_trace::<f32, ChaCha8Rng>(&self.layers, &self.params, lines, None);
        Ok(Prediction::from_probabilities(
            trace.probabilities(),
            flagged,
        ))
    }

    /// Forward pass; `training` enables dropout driven by the model's own RNG.
    pub fn forward(&mut self, lines: &[f32], training: bool) -> Result<Prediction, ModelError> {
        let flagged = self.check_input(lines)?;
        let rng = if training {
            Some(&mut self.dropout_rng)
        } else {
            None
        };
        let trace = forward_trace(&self.layers, &self.params, lines, rng);
        Ok(Prediction::from_probabilities(
            trace.probabilities(),
            flagged,
        ))
    }

    fn set_dropout_rate(&mut self, rate: f32) {
        for layer in &mut self.layers {
            if let Layer::Dropout { rate: r } = layer {
                *r = rate;
            }
        }
    }
}

/// Activations recorded by a forward pass.
struct Trace<T> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<T>>,
    pool_argmax: Vec<Vec<u32>>,
    dropout_masks: Vec<Vec<T>>,
}

impl<T: Float> Trace<T> {
    fn probabilities(&self) -> [f64; N_CLASSES] {
        let out = self.acts.last().expect("non-empty trace");
        let mut p = [0.0; N_CLASSES];
        for (dst, src) in p.iter_mut().zip(out) {
            *dst = src.to_f64().unwrap_or(f64::NAN);
        }
        p
    }

    /// Cross-entropy from the softmax inputs, without the probability floor.
    /// This is the function the backward pass differentiates. Written as
    /// `ln(1 + Σ exp(z_j - z_y))` so tiny losses keep their relative precision.
    fn logit_loss(&self, label: usize) -> f64 {
        let logits = &self.acts[self.acts.len() - 2];
        let z_y = logits[label].to_f64().unwrap_or(f64::NAN);
        let diffs: Vec<f64> = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, v)| v.to_f64().unwrap_or(f64::NAN) - z_y)
            .collect();
        let m = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m <= 0.0 {
            diffs.iter().map(|d| d.exp()).sum::<f64>().ln_1p()
        } else {
            m + ((-m).exp() + diffs.iter().map(|d| (d - m).exp()).sum::<f64>()).ln()
        }
    }
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[inline]
fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

fn forward_trace<T: Float, R: Rng>(
    layers: &[Layer],
    params: &[T],
    input: &[T],
    mut dropout_rng: Option<&mut R>,
) -> Trace<T> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut pool_argmax = vec![Vec::new(); layers.len()];
    let mut dropout_masks = vec![Vec::new(); layers.len()];
    acts.push(input.to_vec());
    let mut channels = 1;
    let mut offset = 0;
    for (li, layer) in layers.iter().enumerate() {
        let x = acts.last().expect("input pushed");
        let len = x.len() / channels;
        let y: Vec<T> = match *layer {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let out_len = len - kernel + 1;
                let w = &params[offset..offset + out_channels * in_channels * kernel];
                let b = &params[offset + w.len()..offset + w.len() + out_channels];
                let mut y = vec![T::zero(); out_channels * out_len];
                for o in 0..out_channels {
                    let yo = &mut y[o * out_len..(o + 1) * out_len];
                    yo.iter_mut().for_each(|v| *v = b[o]);
                    for i in 0..in_channels {
                        let xi = &x[i * len..(i + 1) * len];
                        for k in 0..kernel {
                            let wk = w[(o * in_channels + i) * kernel + k];
                            axpy(wk, &xi[k..k + out_len], yo);
                        }
                    }
                }
                channels = out_channels;
                y
            }
            Layer::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            Layer::MaxPool { size } => {
                let out_len = len / size;
                let mut y = Vec::with_capacity(channels * out_len);
                let mut idx = Vec::with_capacity(channels * out_len);
                for c in 0..channels {
                    for t in 0..out_len {
                        let start = c * len + t * size;
                        let mut best = start;
                        for j in start + 1..start + size {
                            if x[j] > x[best] {
                                best = j;
                            }
                        }
                        y.push(x[best]);
                        idx.push(best as u32);
                    }
                }
                pool_argmax[li] = idx;
                y
            }
            Layer::Flatten => {
                channels = 1;
                x.clone()
            }
            Layer::Dense { inputs, outputs } => {
                let w = &params[offset..offset + outputs * inputs];
                let b = &params[offset + w.len()..offset + w.len() + outputs];
                (0..outputs)
                    .map(|o| b[o] + dot(&w[o * inputs..(o + 1) * inputs], x))
                    .collect()
            }
            Layer::Dropout { rate } => match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = T::from(1.0 / (1.0 - f64::from(rate))).expect("finite scale");
                    let mask: Vec<T> = (0..x.len())
                        .map(|_| {
                            if rng.random::<f32>() >= rate {
                                keep
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let y = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    dropout_masks[li] = mask;
                    y
                }
                _ => x.clone(),
            },
            Layer::Softmax => {
                let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
                let sum = exps.iter().fold(T::zero(), |s, &v| s + v);
                exps.into_iter().map(|v| v / sum).collect()
            }
        };
        offset += layer.param_count();
        acts.push(y);
    }
    Trace {
        acts,
        pool_argmax,
        dropout_masks,
    }
}

/// Accumulates the cross-entropy gradient for one sample into `grad`.
fn backward<T: Float + AddAssign>(
    layers: &[Layer],
    params: &[T],
    trace: &Trace<T>,
    label: usize,
    grad: &mut [T],
) {
    let offsets: Vec<usize> = layers
        .iter()
        .scan(0, |acc, l| {
            let start = *acc;
            *acc += l.param_count();
            Some(start)
        })
        .collect();

    // Softmax followed by cross-entropy: d loss / d logits = p - onehot.
    let probs = trace.acts.last().expect("non-empty trace");
    let mut delta: Vec<T> = probs.clone();
    delta[label] = delta[label] - T::one();

    for li in (0..layers.len()).rev() {
        let x = &trace.acts[li];
        let offset = offsets[li];
        delta = match layers[li] {
            Layer::Softmax => delta,
            Layer::Dense { inputs, outputs } => {
                let (gw, rest) = grad[offset..offset + outputs * inputs + outputs]
                    .split_at_mut(outputs * inputs);
                let w = &params[offset..offset + outputs * inputs];
                let mut dx = vec![T::zero(); inputs];
                for o in 0..outputs {
                    let d = delta[o];
                    rest[o] += d;
                    axpy(d, x, &mut gw[o * inputs..(o + 1) * inputs]);
                    if li > 0 {
                        axpy(d, &w[o * inputs..(o + 1) * inputs], &mut dx);
                    }
                }
                dx
            }
            Layer::Relu => delta
                .iter()
                .zip(x)
                .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                .collect(),
            Layer::MaxPool { .. } => {
                let mut dx = vec![T::zero(); x.len()];
                for (&d, &j) in delta.iter().zip(&trace.pool_argmax[li]) {
                    dx[j as usize] += d;
                }
                dx
            }
            Layer::Flatten => delta,
            Layer::Dropout { .. } => {
                let mask = &trace.dropout_masks[li];
                if mask.is_empty() {
                    delta
                } else {
                    delta.iter().zip(mask).map(|(&d, &m)| d * m).collect()
                }
            }
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let len = x.len() / in_channels;
                let out_len = len - kernel + 1;
                let n_w = out_channels * in_channels * kernel;
                let w = &params[offset..offset + n_w];
                let (gw, gb) = grad[offset..offset + n_w + out_channels].split_at_mut(n_w);
                let mut dx = vec![T::zero(); if li > 0 { x.len() } else { 0 }];
                for o in 0..out_channels {
                    let d_o = &delta[o * out_len..(o + 1) * out_len];
                    gb[o] += d_o.iter().fold(T::zero(), |s, &v| s + v);
                    for i in 0..in_channels {
                        let xi = &x[i * len..(i + 1) * len];
                        for k in 0..kernel {
                            let wi = (o * in_channels + i) * kernel + k;
                            gw[wi] += dot(d_o, &xi[k..k + out_len]);
                            if li > 0 {
                                axpy(w[wi], d_o, &mut dx[i * len + k..i * len + k + out_len]);
                            }
                        }
                    }
                }
                dx
            }
        };
    }
}

fn argmax(p: &[f64; N_CLASSES]) -> usize {
    let mut best = 0;
    for c in 1..N_CLASSES {
        if p[c] > p[best] {
            best = c;
        }
    }
    best
}

/// Mean loss and accuracy of inference-mode predictions.
fn evaluate_split(model: &ClassifierModel, inputs: &[(Vec<f32>, usize)]) -> (f64, f64) {
    if inputs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for (x, y) in inputs {
        let p =
            forward_trace::<f32, ChaCha8Rng>(&model.layers, &model.params, x, None).probabilities();
        total_loss += loss(&p, MachiningClass::from_index(*y).expect("label"));
        correct += usize::from(argmax(&p) == *y);
    }
    (
        total_loss / inputs.len() as f64,
        correct as f64 / inputs.len() as f64,
    )
}

fn split_inputs(ds: &LabeledDataset, split: Split) -> Vec<(Vec<f32>, usize)> {
    ds.split_samples(split)
        .map(|s| (s.lines_f32(), s.label.index()))
        .collect()
}

/// Trains with RMSprop on the Train split, scoring Val after every epoch.
/// Returns the weights of the epoch with the best validation accuracy
/// (earliest on ties) together with the full log.
pub fn train(
    mut model: ClassifierModel,
    ds: &LabeledDataset,
    hp: &Hyperparameters,
) -> Result<ClassifierModel, ModelError> {
    hp.validate()?;
    let train_set = split_inputs(ds, Split::Train);
    let val_set = split_inputs(ds, Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(ModelError::EmptyDataset(format!(
            "train split has {} samples, val split has {}",
            train_set.len(),
            val_set.len()
        )));
    }
    for class in MachiningClass::ALL {
        if !train_set.iter().any(|(_, y)| *y == class.index()) {
            return Err(ModelError::MissingClass(class));
        }
    }
    if let Some((x, _)) = train_set.iter().find(|(x, _)| x.len() != model.n_inputs) {
        return Err(ModelError::WrongInputLength {
            expected: model.n_inputs,
            got: x.len(),
        });
    }

    model.set_dropout_rate(hp.dropout_rate);
    model.crop_db = ds.manifest.config.crop_db as f32;
    model.training_log.clear();
    if hp.epochs == 0 {
        return Ok(model);
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hp.rng_seed);
    model.dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(hp.rng_seed, u64::MAX));
    let n_params = model.params.len();
    let mut cache = vec![0.0f32; n_params];
    let mut grad = vec![0.0f32; n_params];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, Vec<f32>)> = None;
    let (lr, rho, eps) = (hp.learning_rate, hp.rho, hp.epsilon);

    for epoch in 1..=hp.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for batch in order.chunks(hp.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let (x, y) = &train_set[i];
                let trace = forward_trace(
                    &model.layers,
                    &model.params,
                    x,
                    Some(&mut model.dropout_rng),
                );
                let p = trace.probabilities();
                epoch_loss += loss(&p, MachiningClass::from_index(*y).expect("label"));
                epoch_correct += usize::from(argmax(&p) == *y);
                backward(&model.layers, &model.params, &trace, *y, &mut grad);
            }
            let scale = 1.0 / batch.len() as f32;
            for ((theta, c), g) in model.params.iter_mut().zip(&mut cache).zip(&grad) {
                let g = g * scale;
                *c = rho * *c + (1.0 - rho) * g * g;
                *theta -= lr * g / (c.sqrt() + eps);
            }
        }
        let (val_loss, val_accuracy) = evaluate_split(&model, &val_set);
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            train_accuracy: epoch_correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            entry.train_loss,
            entry.train_accuracy,
            entry.val_loss,
            entry.val_accuracy
        );
        model.training_log.push(entry);
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(model)
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    /// Largest `|g_a - g_n| / max(|g_a| + |g_n|, 1e-8)` over the checked parameters.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose ±step perturbation flipped a ReLU or a max-pool
    /// winner; the loss is not differentiable across such a step, so they
    /// were replaced by other draws.
    pub skipped_at_kinks: usize,
}

/// Minimum number of parameters compared by [`gradient_check`].
pub const GRADIENT_CHECK_SAMPLES: usize = 200;

fn activation_pattern<T: Float>(layers: &[Layer], trace: &Trace<T>) -> Vec<u32> {
    let mut sig = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Relu => sig.extend(trace.acts[li].iter().map(|&v| u32::from(v > T::zero()))),
            Layer::MaxPool { .. } => sig.extend_from_slice(&trace.pool_argmax[li]),
            _ => {}
        }
    }
    sig
}

/// Compares backprop gradients with central finite differences in `f64`
/// for a seeded random subsample of parameters. Dropout is off. The loss is
/// taken from the logits so that confidently wrong predictions, where the
/// floored loss is flat, still have a meaningful difference quotient.
pub fn gradient_check(
    model: &ClassifierModel,
    lines: &[f64],
    label: MachiningClass,
    step: f64,
    seed: u64,
) -> Result<GradientCheckReport, ModelError> {
    if lines.len() != model.n_inputs {
        return Err(ModelError::WrongInputLength {
            expected: model.n_inputs,
            got: lines.len(),
        });
    }
    let layers = &model.layers;
    let mut params: Vec<f64> = model.params.iter().map(|&p| f64::from(p)).collect();
    let base = forward_trace::<f64, ChaCha8Rng>(layers, &params, lines, None);
    let base_pattern = activation_pattern(layers, &base);
    let mut analytic = vec![0.0f64; params.len()];
    backward(layers, &params, &base, label.index(), &mut analytic);

    let mut order: Vec<usize> = (0..params.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut report = GradientCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for idx in order {
        if report.checked >= GRADIENT_CHECK_SAMPLES {
            break;
        }
        let original = params[idx];
        let probe = |value: f64, params: &mut Vec<f64>| {
            params[idx] = value;
            let t = forward_trace::<f64, ChaCha8Rng>(layers, params, lines, None);
            (t.logit_loss(label.index()), activation_pattern(layers, &t))
        };
        let (loss_plus, pat_plus) = probe(original + step, &mut params);
        let (loss_minus, pat_minus) = probe(original - step, &mut params);
        params[idx] = original;
        if pat_plus != base_pattern || pat_minus != base_pattern {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Runs `steps` RMSprop updates on single samples without dropout. Used to
/// move a model off its initialization before re-checking gradients.
pub fn train_steps(
    model: &mut ClassifierModel,
    samples: &[(Vec<f32>, MachiningClass)],
    steps: usize,
    hp: &Hyperparameters,
) {
    let mut cache = vec![0.0f32; model.params.len()];
    let mut grad = vec![0.0f32; model.params.len()];
    for s in 0..steps {
        let (x, y) = &samples[s % samples.len()];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let trace = forward_trace::<f32, ChaCha8Rng>(&model.layers, &model.params, x, None);
        backward(&model.layers, &model.params, &trace, y.index(), &mut grad);
        for ((theta, c), g) in model.params.iter_mut().zip(&mut cache).zip(&grad) {
            *c = hp.rho * *c + (1.0 - hp.rho) * g * g;
            *theta -= hp.learning_rate * g / (c.sqrt() + hp.epsilon);
        }
    }
}

const LAYER_CONV: u8 = 1;
const LAYER_RELU: u8 = 2;
const LAYER_POOL: u8 = 3;
const LAYER_FLATTEN: u8 = 4;
const LAYER_DENSE: u8 = 5;
const LAYER_DROPOUT: u8 = 6;
const LAYER_SOFTMAX: u8 = 7;

/// Serializes a model:
///
/// ```text
/// magic "CHMD" | version u32 | seed u64 | n_inputs u32 | crop_db f32 | n_layers u32
/// per layer: tag u8 | a u32 | b u32 | c u32
/// n_params u64 | params f32...
/// n_epochs u32 | per epoch: epoch u32 | train_loss f64 | train_acc f64 | val_loss f64 | val_acc f64
/// ```
pub fn model_to_bytes(model: &ClassifierModel) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + model.params.len() * 4);
    b.extend_from_slice(MODEL_MAGIC);
    b.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    b.extend_from_slice(&model.seed.to_le_bytes());
    b.extend_from_slice(&(model.n_inputs as u32).to_le_bytes());
    b.extend_from_slice(&model.crop_db.to_le_bytes());
    b.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        let (tag, a, bb, c) = match *layer {
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => (
                LAYER_CONV,
                in_channels as u32,
                out_channels as u32,
                kernel as u32,
            ),
            Layer::Relu => (LAYER_RELU, 0, 0, 0),
            Layer::MaxPool { size } => (LAYER_POOL, size as u32, 0, 0),
            Layer::Flatten => (LAYER_FLATTEN, 0, 0, 0),
            Layer::Dense { inputs, outputs } => (LAYER_DENSE, inputs as u32, outputs as u32, 0),
            Layer::Dropout { rate } => (LAYER_DROPOUT, rate.to_bits(), 0, 0),
            Layer::Softmax => (LAYER_SOFTMAX, 0, 0, 0),
        };
        b.push(tag);
        for v in [a, bb, c] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        b.extend_from_slice(&p.to_le_bytes());
    }
    b.extend_from_slice(&(model.training_log.len() as u32).to_le_bytes());
    for e in &model.training_log {
        b.extend_from_slice(&(e.epoch as u32).to_le_bytes());
        for v in [e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ClassifierModel, ModelError> {
    let corrupt = |m: String| ModelError::CorruptModel(m);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        let end = pos + n;
        if end > bytes.len() {
            return Err(ModelError::CorruptModel(format!(
                "truncated at byte {}",
                bytes.len()
            )));
        }
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    macro_rules! read {
        ($t:ty) => {
            <$t>::from_le_bytes(take(std::mem::size_of::<$t>())?.try_into().expect("sized"))
        };
    }
    if take(4)? != MODEL_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = read!(u32);
    if version != MODEL_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let seed = read!(u64);
    let n_inputs = read!(u32) as usize;
    let crop_db = read!(f32);
    let n_layers = read!(u32) as usize;
    if n_layers > 1024 {
        return Err(corrupt(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let tag = read!(u8);
        let a = read!(u32);
        let b = read!(u32);
        let c = read!(u32);
        layers.push(match tag {
            LAYER_CONV => Layer::Conv1d {
                in_channels: a as usize,
                out_channels: b as usize,
                kernel: c as usize,
            },
            LAYER_RELU => Layer::Relu,
            LAYER_POOL => Layer::MaxPool { size: a as usize },
            LAYER_FLATTEN => Layer::Flatten,
            LAYER_DENSE => Layer::Dense {
                inputs: a as usize,
                outputs: b as usize,
            },
            LAYER_DROPOUT => Layer::Dropout {
                rate: f32::from_bits(a),
            },
            LAYER_SOFTMAX => Layer::Softmax,
            other => return Err(corrupt(format!("layer {i}: unknown tag {other}"))),
        });
    }
    validate_architecture(&layers, n_inputs).map_err(corrupt)?;
    let expected: usize = layers.iter().map(Layer::param_count).sum();
    let n_params = read!(u64) as usize;
    if n_params != expected {
        return Err(corrupt(format!(
            "{n_params} parameters stored, architecture needs {expected}"
        )));
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(read!(f32));
    }
    let n_epochs = read!(u32) as usize;
    let mut training_log = Vec::with_capacity(n_epochs.min(1 << 16));
    for _ in 0..n_epochs {
        training_log.push(EpochLog {
            epoch: read!(u32) as usize,
            train_loss: read!(f64),
            train_accuracy: read!(f64),
            val_loss: read!(f64),
            val_accuracy: read!(f64),
        });
    }
    if pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(ClassifierModel {
        layers,
        params,
        n_inputs,
        crop_db,
        seed,
        dropout_rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX)),
        training_log,
    })
}

pub fn save_model(model: &ClassifierModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ClassifierModel, ModelError> {
    model_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_frame(seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f32> = (0..N_INPUTS)
            .map(|_| rng.random_range(-20.0..0.0))
            .collect();
        v[rng.random_range(0..N_INPUTS)] = 0.0;
        v
    }

    /// Parameter count recomputed from the layer table by hand.
    #[test]
    fn parameter_count_matches_closed_form() {
        let conv1 = 16 * 7 + 16; // one input channel
        let len1 = (1024 - 7 + 1) / 4; // 254
        let conv2 = 32 * 16 * 5 + 32;
        let len2 = (len1 - 5 + 1) / 4; // 62
        let dense1 = 32 * len2 * 128 + 128;
        let dense2 = 128 * 64 + 64;
        let dense3 = 64 * 3 + 3;
        let total = conv1 + conv2 + dense1 + dense2 + dense3;
        assert_eq!(total, 265_251);
        assert_eq!(build_model(1).param_count(), total);
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(build_model(9), build_model(9));
        assert_ne!(build_model(9).params(), build_model(10).params());
    }

    #[test]
    fn biases_start_at_zero_and_weights_within_he_limit() {
        let m = build_model(3);
        let mut offset = 0;
        for layer in m.layers() {
            if let Layer::Dense { inputs, outputs } = *layer {
                let limit = (6.0 / inputs as f64).sqrt() as f32;
                let w = &m.params()[offset..offset + inputs * outputs];
                assert!(w.iter().all(|v| v.abs() <= limit));
                let b = &m.params()[offset + inputs * outputs..offset + layer.param_count()];
                assert!(b.iter().all(|&v| v == 0.0));
            }
            offset += layer.param_count();
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = build_model(5);
        for s in 0..5 {
            let p = m.predict(&random_frame(s)).unwrap();
            let sum: f64 = p.probabilities.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.probabilities.iter().all(|&v| v >= 0.0));
            assert!(!p.input_out_of_range);
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let m = build_model(5);
        assert!(matches!(
            m.predict(&vec![0.0; 1023]),
            Err(ModelError::WrongInputLength {
                expected: 1024,
                got: 1023
            })
        ));
    }

    #[test]
    fn out_of_range_input_is_flagged() {
        let m = build_model(5);
        let mut x = vec![-5.0f32; N_INPUTS];
        x[3] = 4.0;
        assert!(m.predict(&x).unwrap().input_out_of_range);
    }

    #[test]
    fn floor_and_flat_frames_differ() {
        let m = build_model(11);
        let a = m.predict(&vec![-20.0; N_INPUTS]).unwrap();
        let b = m.predict(&vec![0.0; N_INPUTS]).unwrap();
        assert_ne!(a.probabilities, b.probabilities);
    }

    #[test]
    fn inference_is_deterministic_but_training_mode_is_not() {
        let mut m = build_model(2);
        let x = random_frame(1);
        let a = m.forward(&x, false).unwrap();
        let b = m.forward(&x, false).unwrap();
        assert_eq!(a, b);
        let t1 = m.forward(&x, true).unwrap();
        let t2 = m.forward(&x, true).unwrap();
        assert_ne!(t1.probabilities, t2.probabilities);
    }

    #[test]
    fn loss_values() {
        assert_eq!(loss(&[1.0, 0.0, 0.0], MachiningClass::Chatter), 0.0);
        let third = 1.0 / 3.0;
        for c in MachiningClass::ALL {
            assert!((loss(&[third; 3], c) - 3f64.ln()).abs() < 1e-12);
        }
        assert!(
            (loss(&[0.25, 0.5, 0.25], MachiningClass::MachiningNoChatter) - std::f64::consts::LN_2)
                .abs()
                < 1e-9
        );
        assert!(
            (loss(&[0.0, 1.0, 0.0], MachiningClass::Chatter) - 1e-12f64.ln().abs()).abs() < 1e-9
        );
    }

    #[test]
    fn ties_pick_lowest_class() {
        let p = Prediction::from_probabilities([0.4, 0.4, 0.2], false);
        assert_eq!(p.predicted, MachiningClass::Chatter);
        let p = Prediction::from_probabilities([0.2, 0.4, 0.4], false);
        assert_eq!(p.predicted, MachiningClass::MachiningNoChatter);
    }

    #[test]
    fn gradient_check_fresh_model() {
        let m = build_model(21);
        let x: Vec<f64> = random_frame(4).iter().map(|&v| f64::from(v)).collect();
        let r = gradient_check(&m, &x, MachiningClass::MachiningNoChatter, 1e-3, 1).unwrap();
        assert!(r.checked >= GRADIENT_CHECK_SAMPLES, "{r:?}");
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gradient_check_zero_input() {
        let m = build_model(22);
        let r = gradient_check(&m, &[0.0; N_INPUTS], MachiningClass::Chatter, 1e-3, 2).unwrap();
        assert!(r.max_relative_error.is_finite());
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn architecture_validation() {
        let mut layers = default_architecture(N_INPUTS, 0.3);
        assert!(validate_architecture(&layers, N_INPUTS).is_ok());
        assert!(validate_architecture(&layers, 1000).is_err());
        layers.pop();
        assert!(validate_architecture(&layers, N_INPUTS).is_err());
    }

    #[test]
    fn model_bytes_round_trip() {
        let mut m = build_model(8);
        m.training_log.push(EpochLog {
            epoch: 1,
            train_loss: 0.5,
            train_accuracy: 0.75,
            val_loss: 0.6,
            val_accuracy: 0.7,
        });
        let back = model_from_bytes(&model_to_bytes(&m)).unwrap();
        assert_eq!(back, m);
        let x = random_frame(3);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_model_bytes() {
        let bytes = model_to_bytes(&build_model(8));
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&(MODEL_VERSION + 1).to_le_bytes());
        assert!(matches!(
            model_from_bytes(&bumped),
            Err(ModelError::CorruptModel(_))
        ));
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() / 2]),
            Err(ModelError::CorruptModel(_))
        ));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            model_from_bytes(&bad_magic),
            Err(ModelError::CorruptModel(_))
        ));
        // Dense layer width no longer chains.
        let mut bad_shape = bytes.clone();
        let first_layer = 4 + 4 + 8 + 4 + 4 + 4;
        let dense1 = first_layer + 7 * 13;
        assert_eq!(bad_shape[dense1], LAYER_DENSE);
        bad_shape[dense1 + 1..dense1 + 5].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(
            model_from_bytes(&bad_shape),
            Err(ModelError::CorruptModel(_))
        ));
    }

    #[test]
    fn training_log_csv_format() {
        let csv = training_log_csv(&[EpochLog {
            epoch: 1,
            train_loss: 0.5,
            train_accuracy: 0.75,
            val_loss: 0.25,
            val_accuracy: 1.0,
        }]);
        assert_eq!(
            csv,
            "epoch,train_loss,train_acc,val_loss,val_acc\n1,0.500000,0.750000,0.250000,1.000000\n"
        );
    }

    /// 30 noiseless frames, ten per class, split 21/9.
    fn small_dataset() -> crate::dataset::LabeledDataset {
        use crate::dataset::{build_dataset, SourceInput};
        use crate::signal_io::LabelTrack;
        use crate::spectral::SpectralConfig;
        use crate::synth::{generate, SynthSpec};

        let sources: Vec<SourceInput> = MachiningClass::ALL
            .iter()
            .enumerate()
            .map(|(i, &class)| {
                let spec = SynthSpec {
                    spindle_rpm: 3000.0,
                    n_teeth: 4,
                    structural_mode_hz: 1110.0,
                    chatter_ratio: 3.0,
                    noise_sigma: 0.0,
                    amplitude_scale: 0.2,
                    duration_s: 1.0,
                    seed: i as u64,
                    class,
                    ambiguity: 0.0,
                };
                SourceInput {
                    id: class.to_string(),
                    signal: generate(&spec).unwrap(),
                    labels: LabelTrack::single(0.0, 1.0, class).unwrap(),
                    ambiguous: false,
                    origin: spec.to_record(),
                }
            })
            .collect();
        build_dataset(&sources, &SpectralConfig::default(), 5, 0.0).unwrap()
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let ds = small_dataset();
        let m = build_model(31);
        let hp = Hyperparameters {
            epochs: 0,
            ..Default::default()
        };
        let out = train(m.clone(), &ds, &hp).unwrap();
        assert_eq!(out, m);
        assert!(out.training_log.is_empty());
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let m = build_model(32);
        let mut stepped = m.clone();
        let hp = Hyperparameters {
            learning_rate: 0.0,
            ..Default::default()
        };
        train_steps(
            &mut stepped,
            &[(random_frame(1), MachiningClass::Chatter)],
            1,
            &hp,
        );
        assert_eq!(stepped.params(), m.params());

        let ds = small_dataset();
        let hp = Hyperparameters {
            learning_rate: 0.0,
            epochs: 1,
            ..Default::default()
        };
        let trained = train(m.clone(), &ds, &hp).unwrap();
        assert_eq!(trained.params(), m.params());
        assert_eq!(trained.training_log.len(), 1);
    }

    #[test]
    fn training_requires_every_class_and_both_splits() {
        let mut ds = small_dataset();
        let hp = Hyperparameters {
            epochs: 1,
            ..Default::default()
        };
        let keep: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.samples[i].label != MachiningClass::RotationNoMachining)
            .collect();
        let mut partial = ds.clone();
        partial.samples = keep.iter().map(|&i| ds.samples[i].clone()).collect();
        partial.splits = keep.iter().map(|&i| ds.splits[i]).collect();
        assert!(matches!(
            train(build_model(1), &partial, &hp),
            Err(ModelError::MissingClass(
                MachiningClass::RotationNoMachining
            ))
        ));
        ds.splits.iter_mut().for_each(|s| *s = Split::Train);
        assert!(matches!(
            train(build_model(1), &ds, &hp),
            Err(ModelError::EmptyDataset(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = small_dataset();
        let hp = Hyperparameters {
            rng_seed: 4,
            ..Default::default()
        };
        let a = train(build_model(33), &ds, &hp).unwrap();
        let b = train(build_model(33), &ds, &hp).unwrap();
        assert_eq!(a.training_log, b.training_log);
        assert_eq!(model_to_bytes(&a), model_to_bytes(&b));
        assert_eq!(a.training_log.len(), 30);
        let first = a.training_log[0].train_loss;
        let last = a.training_log[29].train_loss;
        assert!(last < first, "loss {first} -> {last}");

        let best = a
            .training_log
            .iter()
            .map(|e| e.val_accuracy)
            .fold(0.0, f64::max);
        let (x, y): (Vec<_>, Vec<_>) = ds
            .split_samples(Split::Val)
            .map(|s| (s.lines_f32(), s.label))
            .unzip();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(x, y)| a.predict(x).unwrap().predicted == **y)
            .count();
        assert_eq!(correct as f64 / y.len() as f64, best);
    }

    #[test]
    fn gradient_check_across_seeds_and_after_training() {
        let ds = small_dataset();
        let samples: Vec<(Vec<f32>, MachiningClass)> = ds
            .samples
            .iter()
            .map(|s| (s.lines_f32(), s.label))
            .collect();
        let hp = Hyperparameters::default();
        for seed in 0..10u64 {
            let mut m = build_model(100 + seed);
            let (frame, label) = &samples[(7 * seed as usize) % samples.len()];
            let x: Vec<f64> = frame.iter().map(|&v| f64::from(v)).collect();
            let before = gradient_check(&m, &x, *label, 1e-3, seed).unwrap();
            assert!(before.max_relative_error < 1e-4, "seed {seed}: {before:?}");

            let batch: Vec<_> = (0..5)
                .map(|k| samples[(seed as usize + 11 * k) % samples.len()].clone())
                .collect();
            train_steps(&mut m, &batch, 5, &hp);
            let after = gradient_check(&m, &x, *label, 1e-3, seed).unwrap();
            assert!(
                after.max_relative_error < 1e-4,
                "seed {seed} trained: {after:?}"
            );
        }
    }

    #[test]
    fn saved_model_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.chmd");
        let mut m = build_model(41);
        train_steps(
            &mut m,
            &[(random_frame(9), MachiningClass::Chatter)],
            3,
            &Hyperparameters::default(),
        );
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        for k in 0..100 {
            let x = random_frame(1000 + k);
            let (p, q) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
            assert!(p
                .probabilities
                .iter()
                .zip(&q.probabilities)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn hyperparameter_defaults() {
        let hp = Hyperparameters::default();
        assert_eq!(hp.batch_size, 2);
        assert_eq!(hp.learning_rate, 0.0001);
        assert_eq!(hp.epochs, 30);
        assert_eq!(hp.dropout_rate, 0.3);
        assert_eq!(hp.rho, 0.9);
        assert_eq!(hp.epsilon, 1e-7);
    }
}
