//! Small fully-connected ReLU network trained with temperature-scaled
//! softmax cross-entropy and momentum SGD.
//!
//! The same type serves as the (K+1)-way detector and the K-way classifier.
//! All arithmetic is `f64`.
//!
//! Weight layout: each layer stores a `fan_out × fan_in` row-major matrix, so
//! `z[o] = bias[o] + Σ_i weights[o * fan_in + i] * a[i]`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected input of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target class {class} out of range for {outputs} outputs")]
    ClassOutOfRange { class: usize, outputs: usize },
    #[error("non-finite parameter after epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, dropout_rate: f64) -> Result<Self, NnError> {
        let spec = NetSpec {
            input_dim,
            hidden_dims,
            output_dim,
            dropout_rate,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 {
            return Err(NnError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(NnError::InvalidSpec("hidden layer widths must be positive".into()));
        }
        if self.output_dim < 2 {
            return Err(NnError::InvalidSpec(format!("output_dim must be >= 2, got {}", self.output_dim)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::InvalidSpec(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (o, z) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.fan_in..(o + 1) * self.fan_in];
            *z += row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Gradients share the layout of the parameters they differentiate.
pub type Gradients = Vec<Layer>;

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    spec: NetSpec,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub logits: Vec<f64>,
    /// Input to the output layer. Equals the input vector when there are no hidden layers.
    pub penultimate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            temperature: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(NnError::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(NnError::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

impl NetParams {
    /// Scaled-uniform init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                for w in layer.weights.iter_mut() {
                    *w = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(NetParams {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn zeros(spec: &NetSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let layers = spec.layer_dims().into_iter().map(|(i, o)| Layer::zeros(i, o)).collect();
        Ok(NetParams {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    /// Forward pass. With `dropout_seed` set and a positive dropout rate, every
    /// hidden unit is zeroed with probability `dropout_rate` and survivors are
    /// scaled by `1/(1-dropout_rate)`.
    pub fn forward(&self, x: &[f64], dropout_seed: Option<u64>) -> Result<ForwardResult, NnError> {
        self.check_input(x)?;
        let mut rng = dropout_seed.filter(|_| self.spec.dropout_rate > 0.0).map(ChaCha8Rng::seed_from_u64);
        let trace = self.forward_trace(x, rng.as_mut());
        let penultimate = trace.activations.last().cloned().unwrap_or_default();
        Ok(ForwardResult {
            logits: trace.logits,
            penultimate,
        })
    }

    /// Logits without dropout.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(x, None)?.logits)
    }

    /// Argmax of the logits, ties broken toward the smallest class index.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize, NnError> {
        Ok(argmax(&self.logits(x)?))
    }

    /// `n_samples` stochastic forward passes mapped through a T=1 softmax.
    pub fn mc_dropout_probs(&self, x: &[f64], n_samples: usize, seed: u64) -> Result<Vec<Vec<f64>>, NnError> {
        (0..n_samples)
            .map(|s| {
                let fr = self.forward(x, Some(seeds::mix(seed, s as u64)))?;
                Ok(softmax_t(&fr.logits, 1.0))
            })
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.spec.input_dim {
            return Err(NnError::DimensionMismatch {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn forward_trace<R: Rng>(&self, x: &[f64], mut dropout: Option<&mut R>) -> Trace {
        let n_hidden = self.layers.len() - 1;
        let keep = 1.0 - self.spec.dropout_rate;
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_hidden);
        let mut masks: Vec<Option<Vec<f64>>> = Vec::with_capacity(n_hidden);
        activations.push(x.to_vec());
        for layer in &self.layers[..n_hidden] {
            let mut z = Vec::with_capacity(layer.fan_out);
            layer.affine(activations.last().unwrap(), &mut z);
            let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            let mask = dropout.as_deref_mut().map(|rng| {
                (0..a.len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect::<Vec<f64>>()
            });
            if let Some(m) = &mask {
                a.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
            }
            pre.push(z);
            masks.push(mask);
            activations.push(a);
        }
        let mut logits = Vec::with_capacity(self.spec.output_dim);
        self.layers[n_hidden].affine(activations.last().unwrap(), &mut logits);
        Trace {
            activations,
            pre,
            masks,
            logits,
        }
    }

    /// Per-example loss and exact parameter gradients of the temperature CE loss.
    pub fn loss_and_grad(&self, x: &[f64], target: usize, temperature: f64) -> Result<(f64, Gradients), NnError> {
        self.check_input(x)?;
        self.check_class(target)?;
        let mut grads = self.zero_grads();
        let loss = self.accumulate_grad::<ChaCha8Rng>(x, target, temperature, None, &mut grads);
        Ok((loss, grads))
    }

    fn zero_grads(&self) -> Gradients {
        self.layers.iter().map(|l| Layer::zeros(l.fan_in, l.fan_out)).collect()
    }

    fn check_class(&self, class: usize) -> Result<(), NnError> {
        if class >= self.spec.output_dim {
            return Err(NnError::ClassOutOfRange {
                class,
                outputs: self.spec.output_dim,
            });
        }
        Ok(())
    }

    fn accumulate_grad<R: Rng>(&self, x: &[f64], target: usize, temperature: f64, dropout: Option<&mut R>, grads: &mut Gradients) -> f64 {
        let trace = self.forward_trace(x, dropout);
        let loss = ce_loss_t(&trace.logits, target, temperature);
        let mut delta = loss_grad_logits(&trace.logits, target, temperature);
        for l in (0..self.layers.len()).rev() {
            let input = &trace.activations[l];
            let g = &mut grads[l];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * g.fan_in..(o + 1) * g.fan_in];
                row.iter_mut().zip(input).for_each(|(gw, a)| *gw += d * a);
            }
            if l == 0 {
                break;
            }
            let layer = &self.layers[l];
            let mut back = vec![0.0; layer.fan_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                back.iter_mut().zip(row).for_each(|(b, w)| *b += d * w);
            }
            let z = &trace.pre[l - 1];
            for (i, b) in back.iter_mut().enumerate() {
                if z[i] <= 0.0 {
                    *b = 0.0;
                }
                if let Some(m) = &trace.masks[l - 1] {
                    *b *= m[i];
                }
            }
            delta = back;
        }
        loss
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Checkpoint layout, all little-endian:
    /// `b"OSALNET1"`, u64 layer count, u64 input_dim, u64 fan_out per layer,
    /// f64 dropout_rate, then per layer the weights (row-major) and biases as f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.layers.len() as u64).to_le_bytes())?;
        w.write_all(&(self.spec.input_dim as u64).to_le_bytes())?;
        for layer in &self.layers {
            w.write_all(&(layer.fan_out as u64).to_le_bytes())?;
        }
        w.write_all(&self.spec.dropout_rate.to_le_bytes())?;
        for layer in &self.layers {
            for v in layer.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let io = |e: std::io::Error| NnError::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64, NnError> {
            r.read_exact(&mut word).map_err(io)?;
            Ok(u64::from_le_bytes(word))
        };
        let n_layers = next_u64(&mut r)? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(NnError::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let input_dim = next_u64(&mut r)? as usize;
        let mut widths = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            widths.push(next_u64(&mut r)? as usize);
        }
        let dropout_rate = f64::from_bits(next_u64(&mut r)?);
        let output_dim = widths.pop().unwrap();
        let spec = NetSpec::new(input_dim, widths, output_dim, dropout_rate).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut params = NetParams::zeros(&spec)?;
        for layer in params.layers.iter_mut() {
            for v in layer.values_mut() {
                r.read_exact(&mut word).map_err(io)?;
                *v = f64::from_le_bytes(word);
            }
        }
        Ok(params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OSALNET1";

struct Trace {
    /// `activations[0]` is the input; `activations[l]` feeds layer `l`.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    logits: Vec<f64>,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp_scaled(logits: &[f64], temperature: f64) -> (f64, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let sum: f64 = logits.iter().map(|&a| (a / temperature - max).exp()).sum();
    (max, sum)
}

/// `q_c = exp(a_c/T) / Σ_j exp(a_j/T)`, evaluated with max-subtraction.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    let (max, sum) = log_sum_exp_scaled(logits, temperature);
    logits.iter().map(|&a| (a / temperature - max).exp() / sum).collect()
}

/// `-log q_target` under a temperature-`T` softmax (one-hot target).
pub fn ce_loss_t(logits: &[f64], target: usize, temperature: f64) -> f64 {
    let (max, sum) = log_sum_exp_scaled(logits, temperature);
    (max + sum.ln() - logits[target] / temperature).max(0.0)
}

/// `∂L/∂a_c = (q_c - p_c) / T`.
pub fn loss_grad_logits(logits: &[f64], target: usize, temperature: f64) -> Vec<f64> {
    let mut q = softmax_t(logits, temperature);
    q[target] -= 1.0;
    q.iter_mut().for_each(|v| *v /= temperature);
    q
}

/// Shannon entropy in nats; `0·ln 0` is taken as 0.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub type Sample<'a> = (&'a [f64], usize);

/// Mini-batch momentum SGD. See [`train_with_history`].
pub fn train(params: NetParams, data: &[Sample<'_>], cfg: &TrainConfig) -> Result<NetParams, NnError> {
    train_with_history(params, data, cfg).map(|(p, _)| p)
}

/// Trains for `cfg.epochs` epochs and also returns the mean training loss of
/// each epoch (losses are measured during the epoch, before each step).
///
/// Update rule per batch: `g = mean_grad + weight_decay·θ`, `v = momentum·v + g`,
/// `θ = θ - lr·v`. Batch order is reshuffled every epoch from `cfg.seed`; dropout
/// masks (if the spec has a dropout rate) draw from the same generator.
pub fn train_with_history(mut params: NetParams, data: &[Sample<'_>], cfg: &TrainConfig) -> Result<(NetParams, Vec<f64>), NnError> {
    cfg.validate()?;
    for &(x, y) in data {
        params.check_input(x)?;
        params.check_class(y)?;
    }
    if cfg.epochs == 0 || data.is_empty() {
        return Ok((params, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let use_dropout = params.spec.dropout_rate > 0.0;
    let mut velocity = params.zero_grads();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = params.zero_grads();
            for &i in batch {
                let (x, y) = data[i];
                let dropout = if use_dropout { Some(&mut rng) } else { None };
                epoch_loss += params.accumulate_grad(x, y, cfg.temperature, dropout, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            for ((layer, grad), vel) in params.layers.iter_mut().zip(&grads).zip(velocity.iter_mut()) {
                for ((p, g), v) in layer.values_mut().zip(grad.values()).zip(vel.values_mut()) {
                    let step = g * scale + cfg.weight_decay * *p;
                    *v = cfg.momentum * *v + step;
                    *p -= cfg.learning_rate * *v;
                }
            }
            if !params.is_finite() {
                return Err(NnError::NonFinite { epoch, batch: batch_no });
            }
        }
        history.push(epoch_loss / data.len() as f64);
    }
    Ok((params, history))
}
