//! Model zoo: a deterministic CNN baseline and its Bayesian variants.
//!
//! Three stochastic placements mirror the evaluation protocol:
//! a fully deterministic network, `ClassifierStochastic` (only the
//! trailing dense block carries weight distributions), and
//! `FullyStochastic` (every parameterized layer does). Training
//! minimizes softmax cross-entropy, plus the KL term weighted by a
//! beta schedule for stochastic models, with SGD-momentum. Prediction
//! averages softmax outputs over Monte Carlo weight samples.

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tape, Tensor};
use crate::variational::{
    elbo_loss, GaussianVariationalParams, PriorSpec, StochasticKind, StochasticLayer, ViMethod,
};
use crate::{derive_rng, Rng};
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

/// Where weight distributions are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StochasticMode {
    Deterministic,
    ClassifierStochastic,
    FullyStochastic,
}

impl StochasticMode {
    pub fn label(&self) -> &'static str {
        match self {
            StochasticMode::Deterministic => "CNN",
            StochasticMode::ClassifierStochastic => "BNN",
            StochasticMode::FullyStochastic => "F-BNN",
        }
    }
}

impl std::str::FromStr for StochasticMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" | "deterministic" => Ok(StochasticMode::Deterministic),
            "bnn" | "classifier_stochastic" => Ok(StochasticMode::ClassifierStochastic),
            "fbnn" | "f-bnn" | "fully_stochastic" => Ok(StochasticMode::FullyStochastic),
            other => Err(Error::InvalidParam(format!("unknown model mode '{other}'"))),
        }
    }
}

/// One entry of an architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: usize, stride: usize, padding: usize },
    MaxPool2d { size: usize },
    Dense { units: usize },
}

/// Architecture plus stochastic placement, inference method and seed.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    pub stochastic_mode: StochasticMode,
    /// Ignored when `stochastic_mode` is `Deterministic`.
    pub method: ViMethod,
    pub classes: usize,
    /// Input shape `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub seed: u64,
    pub prior: PriorSpec,
}

impl ModelConfig {
    /// The default VGG-style desk-scale stack:
    /// conv16, conv16, pool, conv32, conv32, pool, dense128, dense-classes
    /// (3x3 kernels with same padding, relu after every layer but the head).
    pub fn vgg_desk(
        classes: usize,
        input: (usize, usize, usize),
        mode: StochasticMode,
        method: ViMethod,
        seed: u64,
    ) -> Self {
        let conv = |filters| LayerSpec::Conv2d { filters, kernel: 3, stride: 1, padding: 1 };
        ModelConfig {
            layers: vec![
                conv(16),
                conv(16),
                LayerSpec::MaxPool2d { size: 2 },
                conv(32),
                conv(32),
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Dense { units: 128 },
                LayerSpec::Dense { units: classes },
            ],
            stochastic_mode: mode,
            method,
            classes,
            input,
            seed,
            prior: PriorSpec::default(),
        }
    }
}

#[derive(Debug)]
enum Params {
    Deterministic { w: ArrayD<f64>, b: ArrayD<f64> },
    Stochastic(StochasticLayer),
}

#[derive(Debug)]
enum Layer {
    Conv { params: Params, in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize },
    Pool { size: usize },
    Flatten,
    Relu,
    Dense { params: Params, inputs: usize, outputs: usize },
}

/// A built network with owned parameters.
#[derive(Debug)]
pub struct Model {
    pub classes: usize,
    pub stochastic_mode: StochasticMode,
    pub method: ViMethod,
    pub input: (usize, usize, usize),
    pub seed: u64,
    layers: Vec<Layer>,
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound))
}

/// Instantiates the architecture, placing weight distributions where
/// the stochastic mode dictates and validating shape propagation.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    if config.layers.is_empty() {
        return Err(Error::InvalidParam("empty layer spec".into()));
    }
    if config.classes < 2 {
        return Err(Error::InvalidParam(format!("need >= 2 classes, got {}", config.classes)));
    }
    config.prior.validate()?;
    match config.layers.last() {
        Some(LayerSpec::Dense { units }) if *units == config.classes => {}
        Some(LayerSpec::Dense { units }) => {
            return Err(Error::InvalidParam(format!(
                "final dense layer has {units} units but the model has {} classes",
                config.classes
            )));
        }
        _ => return Err(Error::InvalidParam("architecture must end with a dense classifier head".into())),
    }
    let has_dense = config.layers.iter().any(|l| matches!(l, LayerSpec::Dense { .. }));
    if config.stochastic_mode == StochasticMode::ClassifierStochastic && !has_dense {
        return Err(Error::InvalidParam("classifier_stochastic requires at least one dense layer".into()));
    }
    // trailing dense block: every Dense after the last non-Dense spec
    let first_trailing_dense = config
        .layers
        .iter()
        .rposition(|l| !matches!(l, LayerSpec::Dense { .. }))
        .map(|i| i + 1)
        .unwrap_or(0);

    let mut rng = derive_rng(config.seed, 0x1417);
    let mut layers = Vec::new();
    let (mut c, mut h, mut w) = config.input;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidParam("input dimensions must be positive".into()));
    }
    let mut flattened: Option<usize> = None;
    let dense_count = config.layers.len();
    for (i, spec) in config.layers.iter().enumerate() {
        let stochastic = match config.stochastic_mode {
            StochasticMode::Deterministic => false,
            StochasticMode::FullyStochastic => !matches!(spec, LayerSpec::MaxPool2d { .. }),
            StochasticMode::ClassifierStochastic => {
                matches!(spec, LayerSpec::Dense { .. }) && i >= first_trailing_dense
            }
        };
        match *spec {
            LayerSpec::Conv2d { filters, kernel, stride, padding } => {
                if flattened.is_some() {
                    return Err(Error::InvalidParam("conv layer after a dense layer".into()));
                }
                if stride < 1 {
                    return Err(Error::InvalidParam("conv stride must be >= 1".into()));
                }
                let hp = h + 2 * padding;
                let wp = w + 2 * padding;
                if kernel > hp || kernel > wp {
                    return Err(Error::InvalidParam(format!(
                        "layer {i}: {kernel}x{kernel} kernel exceeds padded input {hp}x{wp}"
                    )));
                }
                let fan_in = c * kernel * kernel;
                let params = if stochastic {
                    Params::Stochastic(StochasticLayer::new(
                        StochasticKind::Conv2d {
                            in_channels: c,
                            out_channels: filters,
                            kernel,
                            stride,
                            padding,
                        },
                        config.method,
                        config.prior,
                        &mut rng,
                    )?)
                } else {
                    Params::Deterministic {
                        w: uniform_init(&[filters, c, kernel, kernel], fan_in, &mut rng),
                        b: uniform_init(&[filters], fan_in, &mut rng),
                    }
                };
                layers.push(Layer::Conv { params, in_c: c, out_c: filters, kernel, stride, padding });
                layers.push(Layer::Relu);
                h = (hp - kernel) / stride + 1;
                w = (wp - kernel) / stride + 1;
                c = filters;
            }
            LayerSpec::MaxPool2d { size } => {
                if flattened.is_some() {
                    return Err(Error::InvalidParam("pool layer after a dense layer".into()));
                }
                if size < 1 || h % size != 0 || w % size != 0 {
                    return Err(Error::InvalidParam(format!(
                        "layer {i}: pool window {size} does not divide {h}x{w}"
                    )));
                }
                layers.push(Layer::Pool { size });
                h /= size;
                w /= size;
            }
            LayerSpec::Dense { units } => {
                let inputs = match flattened {
                    Some(f) => f,
                    None => {
                        layers.push(Layer::Flatten);
                        c * h * w
                    }
                };
                let params = if stochastic {
                    Params::Stochastic(StochasticLayer::new(
                        StochasticKind::Dense { inputs, outputs: units },
                        config.method,
                        config.prior,
                        &mut rng,
                    )?)
                } else {
                    Params::Deterministic {
                        w: uniform_init(&[inputs, units], inputs, &mut rng),
                        b: uniform_init(&[units], inputs, &mut rng),
                    }
                };
                layers.push(Layer::Dense { params, inputs, outputs: units });
                if i + 1 < dense_count {
                    layers.push(Layer::Relu);
                }
                flattened = Some(units);
            }
        }
    }
    Ok(Model {
        classes: config.classes,
        stochastic_mode: config.stochastic_mode,
        method: config.method,
        input: config.input,
        seed: config.seed,
        layers,
    })
}

impl Model {
    /// Number of layers carrying weight distributions.
    pub fn stochastic_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l,
                    Layer::Conv { params: Params::Stochastic(_), .. }
                        | Layer::Dense { params: Params::Stochastic(_), .. }
                )
            })
            .count()
    }

    /// Number of layers with trainable parameters.
    pub fn parameterized_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. } | Layer::Dense { .. }))
            .count()
    }

    /// Total scalar parameter count (mu and rho both count).
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Immutable views of every parameter array, in binding order.
    pub fn params(&self) -> Vec<&ArrayD<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { params, .. } | Layer::Dense { params, .. } => match params {
                    Params::Deterministic { w, b } => {
                        out.push(w);
                        out.push(b);
                    }
                    Params::Stochastic(s) => {
                        out.push(&s.weights.mu);
                        out.push(&s.weights.rho);
                        out.push(&s.bias.mu);
                        out.push(&s.bias.rho);
                    }
                },
                _ => {}
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { params, .. } | Layer::Dense { params, .. } => match params {
                    Params::Deterministic { w, b } => {
                        out.push(w);
                        out.push(b);
                    }
                    Params::Stochastic(s) => {
                        out.push(&mut s.weights.mu);
                        out.push(&mut s.weights.rho);
                        out.push(&mut s.bias.mu);
                        out.push(&mut s.bias.rho);
                    }
                },
                _ => {}
            }
        }
        out
    }

    /// Lifts parameters onto a tape (or constants) for one forward pass.
    pub fn bind(&self, tape: Option<&Tape>) -> BoundModel {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut leaves = Vec::new();
        let lift = |arr: &ArrayD<f64>, leaves: &mut Vec<Tensor>| -> Tensor {
            let t = match tape {
                Some(tp) => tp.leaf(arr.clone()),
                None => Tensor::constant(arr.clone()),
            };
            leaves.push(t.clone());
            t
        };
        for layer in &self.layers {
            layers.push(match layer {
                Layer::Conv { params, stride, padding, .. } => match params {
                    Params::Deterministic { w, b } => BoundLayer::Conv {
                        w: lift(w, &mut leaves),
                        b: lift(b, &mut leaves),
                        stride: *stride,
                        padding: *padding,
                    },
                    Params::Stochastic(s) => {
                        let bound = s.bind(tape);
                        leaves.push(bound.weights.mu.clone());
                        leaves.push(bound.weights.rho.clone());
                        leaves.push(bound.bias.mu.clone());
                        leaves.push(bound.bias.rho.clone());
                        BoundLayer::Stochastic(bound)
                    }
                },
                Layer::Dense { params, .. } => match params {
                    Params::Deterministic { w, b } => BoundLayer::Dense {
                        w: lift(w, &mut leaves),
                        b: lift(b, &mut leaves),
                    },
                    Params::Stochastic(s) => {
                        let bound = s.bind(tape);
                        leaves.push(bound.weights.mu.clone());
                        leaves.push(bound.weights.rho.clone());
                        leaves.push(bound.bias.mu.clone());
                        leaves.push(bound.bias.rho.clone());
                        BoundLayer::Stochastic(bound)
                    }
                },
                Layer::Pool { size } => BoundLayer::Pool { size: *size },
                Layer::Flatten => BoundLayer::Flatten,
                Layer::Relu => BoundLayer::Relu,
            });
        }
        BoundModel { layers, leaves }
    }

    /// Logits for a batch, sampling stochastic layers once.
    pub fn logits(&self, x: &Array4<f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        let out = self.bind(None).forward(&Tensor::constant(x.clone().into_dyn()), rng)?;
        Ok(out
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("logits rank 2")
            .to_owned())
    }

    /// Mean softmax output over `n` Monte Carlo samples plus the
    /// per-class standard deviation across samples. A deterministic
    /// model ignores `n` and reports zero spread.
    pub fn predict_mc_batch(
        &self,
        x: &Array4<f64>,
        n: usize,
        rng: &mut Rng,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if n < 1 {
            return Err(Error::InvalidParam("mc sample count must be >= 1".into()));
        }
        let rows = x.shape()[0];
        if self.stochastic_mode == StochasticMode::Deterministic || self.stochastic_layer_count() == 0 {
            let probs = softmax_rows(&self.logits(x, rng)?);
            return Ok((probs, Array2::zeros((rows, self.classes))));
        }
        let mut sum = Array2::<f64>::zeros((rows, self.classes));
        let mut sumsq = Array2::<f64>::zeros((rows, self.classes));
        for _ in 0..n {
            let probs = softmax_rows(&self.logits(x, rng)?);
            sum += &probs;
            sumsq += &probs.mapv(|v| v * v);
        }
        let mean = sum / n as f64;
        let std = if n >= 2 {
            let var = (sumsq - &mean.mapv(|m| m * m) * n as f64) / (n as f64 - 1.0);
            var.mapv(|v| v.max(0.0).sqrt())
        } else {
            Array2::zeros((rows, self.classes))
        };
        Ok((mean, std))
    }

    /// Single-input convenience over [`Model::predict_mc_batch`].
    pub fn predict_mc(
        &self,
        x: &ndarray::ArrayView3<'_, f64>,
        n: usize,
        rng: &mut Rng,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let batch = x
            .to_owned()
            .insert_axis(Axis(0));
        let (mean, std) = self.predict_mc_batch(&batch, n, rng)?;
        Ok((mean.row(0).to_owned(), std.row(0).to_owned()))
    }

    /// Uncertainty summary of the Monte Carlo predictive distribution.
    pub fn predictive_stats(
        &self,
        x: &ndarray::ArrayView3<'_, f64>,
        n: usize,
        rng: &mut Rng,
    ) -> Result<PredictiveStats> {
        if n < 2 {
            return Err(Error::InvalidParam(format!(
                "predictive std needs at least 2 samples, got {n}"
            )));
        }
        let (mean, std) = self.predict_mc(x, n, rng)?;
        Ok(PredictiveStats {
            entropy: entropy(&mean),
            max_prob: mean.iter().cloned().fold(0.0, f64::max),
            per_class_std: std,
        })
    }

    /// Classification accuracy on a dataset with `n` MC samples,
    /// evaluated in fixed-size chunks.
    pub fn accuracy(&self, data: &Dataset, n: usize, rng: &mut Rng) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("accuracy on empty dataset"));
        }
        let mut correct = 0usize;
        let chunk = 128;
        let mut i = 0;
        while i < data.len() {
            let idx: Vec<usize> = (i..(i + chunk).min(data.len())).collect();
            let (images, labels) = data.select(&idx);
            let (probs, _) = self.predict_mc_batch(&images, n, rng)?;
            for (row, label) in probs.rows().into_iter().zip(&labels) {
                if argmax(row.as_slice().expect("contiguous")) == *label {
                    correct += 1;
                }
            }
            i += chunk;
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Entropy in nats of a probability vector; `0 ln 0 = 0`.
pub fn entropy(probs: &Array1<f64>) -> f64 {
    -probs.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>()
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Uncertainty summary returned by [`Model::predictive_stats`].
#[derive(Debug, Clone)]
pub struct PredictiveStats {
    /// Entropy of the mean predictive distribution, in nats.
    pub entropy: f64,
    pub max_prob: f64,
    pub per_class_std: Array1<f64>,
}

enum BoundLayer {
    Conv { w: Tensor, b: Tensor, stride: usize, padding: usize },
    Dense { w: Tensor, b: Tensor },
    Stochastic(crate::variational::BoundStochastic),
    Pool { size: usize },
    Flatten,
    Relu,
}

/// One forward-pass view of a model with parameters lifted to tensors.
pub struct BoundModel {
    layers: Vec<BoundLayer>,
    /// Parameter tensors in the same order as `Model::params`.
    pub leaves: Vec<Tensor>,
}

impl BoundModel {
    pub fn forward(&self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                BoundLayer::Conv { w, b, stride, padding } => {
                    cur.conv2d(w, *stride, *padding)?.add_bias(b)?
                }
                BoundLayer::Dense { w, b } => cur.matmul(w)?.add_bias(b)?,
                BoundLayer::Stochastic(s) => s.forward(&cur, rng)?,
                BoundLayer::Pool { size } => cur.maxpool2d(*size)?,
                BoundLayer::Flatten => cur.flatten()?,
                BoundLayer::Relu => cur.relu(),
            };
        }
        Ok(cur)
    }

    /// Total KL of all stochastic layers, as a scalar tensor.
    pub fn kl(&self) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for layer in &self.layers {
            if let BoundLayer::Stochastic(s) = layer {
                let kl = s.kl()?;
                total = Some(match total {
                    Some(t) => t.add(&kl)?,
                    None => kl,
                });
            }
        }
        Ok(total.unwrap_or_else(|| Tensor::scalar_const(0.0)))
    }
}

/// How the KL term is weighted during training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// `beta = 1 / (batches_per_epoch * batch_size)`. The per-step
    /// loss uses the batch-mean NLL, so this weighting counts the KL
    /// exactly once per epoch relative to the summed log-likelihood:
    /// the epoch-summed objective is the (1/batch_size)-scaled ELBO.
    EpochElbo,
    Constant(f64),
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight samples per training step.
    pub mc_train_samples: usize,
    /// Weight samples per evaluation forward.
    pub mc_eval_samples: usize,
    pub beta: BetaSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            mc_train_samples: 1,
            mc_eval_samples: 10,
            beta: BetaSchedule::EpochElbo,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParam("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParam("momentum must be in [0, 1)".into()));
        }
        if self.mc_train_samples == 0 || self.mc_eval_samples == 0 {
            return Err(Error::InvalidParam("mc sample counts must be >= 1".into()));
        }
        if let BetaSchedule::Constant(b) = self.beta {
            if b < 0.0 {
                return Err(Error::InvalidParam("beta must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub epoch_seconds: Vec<f64>,
    /// Monotonic wall-clock around the optimization loop only.
    pub total_seconds: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// SGD-momentum training on cross-entropy (deterministic) or the
/// ELBO objective (stochastic). Aborts with a diagnostic if the loss
/// leaves the reals. Deterministic given the rng state, up to the
/// wall-clock fields.
pub fn train(model: &mut Model, data: &DataSplit, tc: &TrainConfig, rng: &mut Rng) -> Result<TrainResult> {
    tc.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if data.train.classes != model.classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes but the model expects {}",
            data.train.classes, model.classes
        )));
    }
    let n = data.train.len();
    let num_batches = n.div_ceil(tc.batch_size);
    let beta = match tc.beta {
        BetaSchedule::EpochElbo => 1.0 / (num_batches as f64 * tc.batch_size as f64),
        BetaSchedule::Constant(b) => b,
    };

    let mut velocity: Vec<ArrayD<f64>> = model
        .params()
        .iter()
        .map(|p| ArrayD::zeros(p.raw_dim()))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_seconds = Vec::with_capacity(tc.epochs);
    let started = Instant::now();
    for epoch in 0..tc.epochs {
        let epoch_start = Instant::now();
        order.shuffle(rng);
        for (step, batch_idx) in order.chunks(tc.batch_size).enumerate() {
            let (images, labels) = data.train.select(batch_idx);
            let tape = Tape::new();
            let bound = model.bind(Some(&tape));
            let x = Tensor::constant(images.into_dyn());

            let mut nll: Option<Tensor> = None;
            for _ in 0..tc.mc_train_samples {
                let logits = bound.forward(&x, rng)?;
                let sample_nll = logits.softmax_cross_entropy(&labels)?;
                nll = Some(match nll {
                    Some(acc) => acc.add(&sample_nll)?,
                    None => sample_nll,
                });
            }
            let nll = nll.expect("mc_train_samples >= 1").scale(1.0 / tc.mc_train_samples as f64);
            let loss = if model.stochastic_layer_count() > 0 {
                elbo_loss(&nll, &bound.kl()?, beta)?
            } else {
                nll
            };
            let loss_value = loss.scalar()?;
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {loss_value} at epoch {epoch}, step {step}"
                )));
            }

            let grads = loss.backward()?;
            let mut params = model.params_mut();
            for ((param, vel), leaf) in params.iter_mut().zip(&mut velocity).zip(&bound.leaves) {
                if let Some(g) = grads.get(leaf)? {
                    vel.zip_mut_with(&g, |v, &gi| *v = tc.momentum * *v - tc.learning_rate * gi);
                    param.zip_mut_with(vel, |p, &v| *p += v);
                }
            }
        }
        epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
    }
    let total_seconds = started.elapsed().as_secs_f64();

    let train_accuracy = model.accuracy(&data.train, tc.mc_eval_samples, rng)?;
    let test_accuracy = model.accuracy(&data.test, tc.mc_eval_samples, rng)?;
    Ok(TrainResult { epoch_seconds, total_seconds, train_accuracy, test_accuracy })
}

// ── checkpoint format ───────────────────────────────────────────────
//
// magic "BNCK" | version u32 | classes u32 | mode u8 | method u8 |
// seed u64 | input c,h,w u32 | layer count u32 | layers.
// Layer tags: 0 conv-det, 1 conv-stoch, 2 pool, 3 flatten, 4 relu,
// 5 dense-det, 6 dense-stoch. Conv carries (out,in,kernel,stride,pad),
// dense (inputs,outputs), stochastic params carry prior mean/std then
// mu/rho for weights and bias. All reals little-endian f64.

const CKPT_MAGIC: &[u8; 4] = b"BNCK";
const CKPT_VERSION: u32 = 1;

struct Bin<W>(W);

impl<W: Write> Bin<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.0.write_all(&[v])?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn array(&mut self, a: &ArrayD<f64>) -> Result<()> {
        self.u64(a.len() as u64)?;
        for &v in a.iter() {
            self.f64(v)?;
        }
        Ok(())
    }
}

struct Unbin<R>(R);

impl<R: Read> Unbin<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.0.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn array(&mut self, shape: &[usize]) -> Result<ArrayD<f64>> {
        let len = self.u64()? as usize;
        let expect: usize = shape.iter().product();
        if len != expect {
            return Err(Error::Checkpoint(format!(
                "array length {len} does not match shape {shape:?}"
            )));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("length checked"))
    }
}

fn mode_tag(mode: StochasticMode) -> u8 {
    match mode {
        StochasticMode::Deterministic => 0,
        StochasticMode::ClassifierStochastic => 1,
        StochasticMode::FullyStochastic => 2,
    }
}

fn method_tag(method: ViMethod) -> u8 {
    match method {
        ViMethod::Bbb => 0,
        ViMethod::Lrt => 1,
        ViMethod::Flipout => 2,
        ViMethod::Vi => 3,
    }
}

/// Serializes a model to the versioned binary checkpoint layout.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Bin(std::io::BufWriter::new(file));
    w.0.write_all(CKPT_MAGIC)?;
    w.u32(CKPT_VERSION)?;
    w.u32(model.classes as u32)?;
    w.u8(mode_tag(model.stochastic_mode))?;
    w.u8(method_tag(model.method))?;
    w.u64(model.seed)?;
    w.u32(model.input.0 as u32)?;
    w.u32(model.input.1 as u32)?;
    w.u32(model.input.2 as u32)?;
    w.u32(model.layers.len() as u32)?;
    for layer in &model.layers {
        match layer {
            Layer::Conv { params, in_c, out_c, kernel, stride, padding } => {
                let stochastic = matches!(params, Params::Stochastic(_));
                w.u8(if stochastic { 1 } else { 0 })?;
                for v in [*out_c, *in_c, *kernel, *stride, *padding] {
                    w.u32(v as u32)?;
                }
                write_params(&mut w, params)?;
            }
            Layer::Pool { size } => {
                w.u8(2)?;
                w.u32(*size as u32)?;
            }
            Layer::Flatten => w.u8(3)?,
            Layer::Relu => w.u8(4)?,
            Layer::Dense { params, inputs, outputs } => {
                let stochastic = matches!(params, Params::Stochastic(_));
                w.u8(if stochastic { 6 } else { 5 })?;
                w.u32(*inputs as u32)?;
                w.u32(*outputs as u32)?;
                write_params(&mut w, params)?;
            }
        }
    }
    w.0.flush()?;
    Ok(())
}

fn write_params<W: Write>(w: &mut Bin<W>, params: &Params) -> Result<()> {
    match params {
        Params::Deterministic { w: weights, b } => {
            w.array(weights)?;
            w.array(b)?;
        }
        Params::Stochastic(s) => {
            w.f64(s.prior.mean)?;
            w.f64(s.prior.std)?;
            w.array(&s.weights.mu)?;
            w.array(&s.weights.rho)?;
            w.array(&s.bias.mu)?;
            w.array(&s.bias.rho)?;
        }
    }
    Ok(())
}

/// Loads a checkpoint; a wrong magic or version is an error.
pub fn load_model(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path)?;
    let mut r = Unbin(std::io::BufReader::new(file));
    let mut magic = [0u8; 4];
    r.0.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} does not match supported version {CKPT_VERSION}"
        )));
    }
    let classes = r.u32()? as usize;
    let mode = match r.u8()? {
        0 => StochasticMode::Deterministic,
        1 => StochasticMode::ClassifierStochastic,
        2 => StochasticMode::FullyStochastic,
        t => return Err(Error::Checkpoint(format!("unknown mode tag {t}"))),
    };
    let method = match r.u8()? {
        0 => ViMethod::Bbb,
        1 => ViMethod::Lrt,
        2 => ViMethod::Flipout,
        3 => ViMethod::Vi,
        t => return Err(Error::Checkpoint(format!("unknown method tag {t}"))),
    };
    let seed = r.u64()?;
    let input = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = r.u8()?;
        layers.push(match tag {
            0 | 1 => {
                let out_c = r.u32()? as usize;
                let in_c = r.u32()? as usize;
                let kernel = r.u32()? as usize;
                let stride = r.u32()? as usize;
                let padding = r.u32()? as usize;
                let params = read_params(
                    &mut r,
                    tag == 1,
                    method,
                    StochasticKind::Conv2d { in_channels: in_c, out_channels: out_c, kernel, stride, padding },
                    &[out_c, in_c, kernel, kernel],
                    out_c,
                )?;
                Layer::Conv { params, in_c, out_c, kernel, stride, padding }
            }
            2 => Layer::Pool { size: r.u32()? as usize },
            3 => Layer::Flatten,
            4 => Layer::Relu,
            5 | 6 => {
                let inputs = r.u32()? as usize;
                let outputs = r.u32()? as usize;
                let params = read_params(
                    &mut r,
                    tag == 6,
                    method,
                    StochasticKind::Dense { inputs, outputs },
                    &[inputs, outputs],
                    outputs,
                )?;
                Layer::Dense { params, inputs, outputs }
            }
            t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
        });
    }
    Ok(Model { classes, stochastic_mode: mode, method, input, seed, layers })
}

fn read_params<R: Read>(
    r: &mut Unbin<R>,
    stochastic: bool,
    method: ViMethod,
    kind: StochasticKind,
    w_shape: &[usize],
    bias_len: usize,
) -> Result<Params> {
    if stochastic {
        let prior = PriorSpec { mean: r.f64()?, std: r.f64()? };
        let weights = GaussianVariationalParams::new(r.array(w_shape)?, r.array(w_shape)?)?;
        let bias = GaussianVariationalParams::new(r.array(&[bias_len])?, r.array(&[bias_len])?)?;
        Ok(Params::Stochastic(StochasticLayer { kind, weights, bias, prior, method }))
    } else {
        Ok(Params::Deterministic { w: r.array(w_shape)?, b: r.array(&[bias_len])? })
    }
}
