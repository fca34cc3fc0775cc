//! Small trainable noise predictor.
//!
//! The network is a multilayer perceptron over the concatenation
//! `[x_t, time features, r_t, r_s]` with SiLU hidden activations. The null
//! condition is a pair of learned vectors that replace `r_t` and `r_s`; they
//! are trained by condition dropout.
//!
//! Checkpoints are flat text, one record per line:
//!
//! ```text
//! dog-denoiser v1
//! sample_dim <d>
//! content_dim <d_c>
//! style_dim <d_s>
//! time_features <n>
//! num_steps <T>
//! null_branch <0|1>
//! layers <L>
//! layer <inputs> <outputs>      (repeated L times, each followed by)
//! <inputs*outputs weights, row-major by output unit>
//! <outputs biases>
//! null_content <d_c values>
//! null_style <d_s values>
//! end
//! ```
//!
//! Lines starting with `#` are ignored on load. Values are written in
//! shortest round-trip decimal form, so a checkpoint reloads bit-exactly.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::{Condition, ConditionEmbedder, ConditionPair, ConditionalGmm};
use crate::rng;
use crate::schedule::DiffusionSchedule;
use crate::{Error, Result, Scalar};

use super::Denoiser;

const CHECKPOINT_MAGIC: &str = "dog-denoiser v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpArchitecture {
    /// Widths of the hidden layers (at most five).
    pub hidden: Vec<usize>,
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            time_features: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing the condition by the null condition.
    pub cond_dropout_prob: f64,
    pub seed: u64,
    pub architecture: MlpArchitecture,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 240,
            batch_size: 64,
            learning_rate: 2e-3,
            cond_dropout_prob: 0.2,
            seed: 0,
            architecture: MlpArchitecture::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::config("cond_dropout_prob", "must lie in [0, 1)"));
        }
        if self.architecture.hidden.is_empty() || self.architecture.hidden.len() > 5 {
            return Err(Error::config("hidden", "between 1 and 5 hidden layers"));
        }
        if self.architecture.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if self.architecture.time_features == 0
            || !self.architecture.time_features.is_multiple_of(2)
        {
            return Err(Error::config(
                "time_features",
                "must be a positive even number",
            ));
        }
        Ok(())
    }
}

/// A clean sample with its positive condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub x0: Vec<T>,
    pub cond: ConditionPair<T>,
}

/// Draws `per_slice` samples from every (content, style) slice of `gmm`,
/// each paired with its embedded condition.
pub fn toy_training_set<T: Scalar>(
    gmm: &ConditionalGmm<T>,
    embedder: &ConditionEmbedder,
    per_slice: usize,
    seed: u64,
) -> Result<Vec<TrainingExample<T>>> {
    let mut rng = rng::derived(seed, rng::STREAM_TOY_LAYOUT + 1);
    let mut out = Vec::with_capacity(per_slice * gmm.content_vocab() * gmm.style_vocab());
    for c in 0..gmm.content_vocab() {
        for s in 0..gmm.style_vocab() {
            let cond = embedder.embed::<T>(c, s)?;
            for x0 in gmm.sample(c, s, per_slice, &mut rng)? {
                out.push(TrainingExample {
                    x0,
                    cond: cond.clone(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport<T> {
    /// Mean squared ε error per epoch.
    pub epoch_losses: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense<T> {
    inputs: usize,
    outputs: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (T::of(6.0) / T::of_usize(inputs + outputs)).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| (T::unit_uniform(rng) * T::of(2.0) - T::one()) * bound)
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![T::zero(); outputs],
        }
    }

    fn forward(&self, input: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, &b)| row.iter().zip(input).fold(b, |acc, (&w, &x)| acc + w * x)),
        );
    }
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[inline]
fn silu<T: Scalar>(z: T) -> T {
    z * sigmoid(z)
}

#[inline]
fn silu_grad<T: Scalar>(z: T) -> T {
    let s = sigmoid(z);
    s * (T::one() + z * (T::one() - s))
}

/// A trained multilayer-perceptron noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDenoiser<T> {
    layers: Vec<Dense<T>>,
    null_content: Vec<T>,
    null_style: Vec<T>,
    sample_dim: usize,
    content_dim: usize,
    style_dim: usize,
    time_features: usize,
    num_steps: usize,
    null_branch: bool,
}

struct Activations<T> {
    /// Pre-activation of every layer.
    pre: Vec<Vec<T>>,
    /// Input of every layer (index 0 is the network input).
    inputs: Vec<Vec<T>>,
}

impl<T: Scalar> TrainedDenoiser<T> {
    fn init<R: Rng + ?Sized>(
        sample_dim: usize,
        content_dim: usize,
        style_dim: usize,
        num_steps: usize,
        arch: &MlpArchitecture,
        null_branch: bool,
        rng: &mut R,
    ) -> Self {
        let input = sample_dim + arch.time_features + content_dim + style_dim;
        let mut widths = vec![input];
        widths.extend(&arch.hidden);
        widths.push(sample_dim);
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            null_content: vec![T::zero(); content_dim],
            null_style: vec![T::zero(); style_dim],
            sample_dim,
            content_dim,
            style_dim,
            time_features: arch.time_features,
            num_steps,
            null_branch,
        }
    }

    fn time_embedding(&self, t: usize, out: &mut Vec<T>) {
        let half = self.time_features / 2;
        let t = T::of_usize(t);
        let log_base = T::of(1000.0).ln();
        for i in 0..half {
            let freq = (-log_base * T::of_usize(i) / T::of_usize(half)).exp();
            out.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-log_base * T::of_usize(i) / T::of_usize(half)).exp();
            out.push((t * freq).cos());
        }
    }

    fn network_input(&self, x_t: &[T], t: usize, cond: &Condition<T>) -> Result<Vec<T>> {
        let mut input = Vec::with_capacity(self.layers[0].inputs);
        input.extend_from_slice(x_t);
        self.time_embedding(t, &mut input);
        match cond {
            Condition::Null => {
                input.extend_from_slice(&self.null_content);
                input.extend_from_slice(&self.null_style);
            }
            Condition::Pair(p) => {
                if p.content.len() != self.content_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.content_dim,
                        actual: p.content.len(),
                    });
                }
                if p.style.len() != self.style_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.style_dim,
                        actual: p.style.len(),
                    });
                }
                input.extend_from_slice(&p.content);
                input.extend_from_slice(&p.style);
            }
        }
        Ok(input)
    }

    fn forward(&self, input: Vec<T>) -> (Vec<T>, Activations<T>) {
        let mut acts = Activations {
            pre: Vec::with_capacity(self.layers.len()),
            inputs: Vec::with_capacity(self.layers.len()),
        };
        let mut current = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.forward(&current, &mut z);
            let next = if i == last {
                z.clone()
            } else {
                z.iter().map(|&v| silu(v)).collect()
            };
            acts.inputs.push(std::mem::replace(&mut current, next));
            acts.pre.push(z);
        }
        (current, acts)
    }

    /// Flat text checkpoint; see the module documentation for the layout.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let join = |v: &[T]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "sample_dim {}", self.sample_dim);
        let _ = writeln!(out, "content_dim {}", self.content_dim);
        let _ = writeln!(out, "style_dim {}", self.style_dim);
        let _ = writeln!(out, "time_features {}", self.time_features);
        let _ = writeln!(out, "num_steps {}", self.num_steps);
        let _ = writeln!(out, "null_branch {}", u8::from(self.null_branch));
        let _ = writeln!(out, "layers {}", self.layers.len());
        for layer in &self.layers {
            let _ = writeln!(out, "layer {} {}", layer.inputs, layer.outputs);
            let _ = writeln!(out, "{}", join(&layer.weights));
            let _ = writeln!(out, "{}", join(&layer.bias));
        }
        let _ = writeln!(out, "null_content {}", join(&self.null_content));
        let _ = writeln!(out, "null_style {}", join(&self.null_style));
        let _ = writeln!(out, "end");
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.starts_with('#'));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Checkpoint {
                line: 0,
                reason: format!("unexpected end of file, expected {what}"),
            })
        };
        let (line, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint {
                line,
                reason: format!("unknown header `{magic}`"),
            });
        }
        fn keyed<'a>(line: usize, text: &'a str, key: &str) -> Result<&'a str> {
            text.strip_prefix(key)
                .and_then(|rest| {
                    rest.strip_prefix(' ')
                        .or(if rest.is_empty() { Some("") } else { None })
                })
                .ok_or_else(|| Error::Checkpoint {
                    line,
                    reason: format!("expected `{key}`"),
                })
        }
        fn integer(line: usize, s: &str) -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Checkpoint {
                line,
                reason: format!("`{s}` is not an integer"),
            })
        }
        fn values<T: Scalar>(line: usize, s: &str, expected: usize) -> Result<Vec<T>> {
            let v = s
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<T>().map_err(|_| Error::Checkpoint {
                        line,
                        reason: format!("`{tok}` is not a number"),
                    })
                })
                .collect::<Result<Vec<T>>>()?;
            if v.len() != expected {
                return Err(Error::Checkpoint {
                    line,
                    reason: format!("expected {expected} values, found {}", v.len()),
                });
            }
            Ok(v)
        }
        let mut header = |key: &str| -> Result<usize> {
            let (line, text) = next(key)?;
            integer(line, keyed(line, text, key)?)
        };
        let sample_dim = header("sample_dim")?;
        let content_dim = header("content_dim")?;
        let style_dim = header("style_dim")?;
        let time_features = header("time_features")?;
        let num_steps = header("num_steps")?;
        let null_branch = header("null_branch")? == 1;
        let count = header("layers")?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (line, text) = next("layer")?;
            let dims = keyed(line, text, "layer")?;
            let mut parts = dims.split_whitespace();
            let inputs = integer(line, parts.next().unwrap_or(""))?;
            let outputs = integer(line, parts.next().unwrap_or(""))?;
            let (wl, wtext) = next("weights")?;
            let weights = values(wl, wtext, inputs * outputs)?;
            let (bl, btext) = next("biases")?;
            let bias = values(bl, btext, outputs)?;
            layers.push(Dense {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        let (line, text) = next("null_content")?;
        let null_content = values(line, keyed(line, text, "null_content")?, content_dim)?;
        let (line, text) = next("null_style")?;
        let null_style = values(line, keyed(line, text, "null_style")?, style_dim)?;
        let (line, text) = next("end")?;
        if text != "end" {
            return Err(Error::Checkpoint {
                line,
                reason: "expected `end`".into(),
            });
        }
        let expected_in = sample_dim + time_features + content_dim + style_dim;
        let chained = layers.windows(2).all(|w| w[0].outputs == w[1].inputs);
        if layers.is_empty()
            || layers[0].inputs != expected_in
            || layers[layers.len() - 1].outputs != sample_dim
            || !chained
        {
            return Err(Error::Checkpoint {
                line: 0,
                reason: "layer shapes are inconsistent".into(),
            });
        }
        Ok(Self {
            layers,
            null_content,
            null_style,
            sample_dim,
            content_dim,
            style_dim,
            time_features,
            num_steps,
            null_branch,
        })
    }
}

impl<T: Scalar> Denoiser<T> for TrainedDenoiser<T> {
    fn sample_dim(&self) -> usize {
        self.sample_dim
    }

    fn num_steps(&self) -> usize {
        self.num_steps
    }

    fn has_null_branch(&self) -> bool {
        self.null_branch
    }

    fn raw_predict(&self, x_t: &[T], t: usize, cond: &Condition<T>) -> Result<Vec<T>> {
        let input = self.network_input(x_t, t, cond)?;
        Ok(self.forward(input).0)
    }
}

/// Gradient buffers mirroring the trainable parameters.
struct Grads<T> {
    layers: Vec<(Vec<T>, Vec<T>)>,
    null_content: Vec<T>,
    null_style: Vec<T>,
}

impl<T: Scalar> Grads<T> {
    fn zeros_like(model: &TrainedDenoiser<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        vec![T::zero(); l.weights.len()],
                        vec![T::zero(); l.bias.len()],
                    )
                })
                .collect(),
            null_content: vec![T::zero(); model.content_dim],
            null_style: vec![T::zero(); model.style_dim],
        }
    }

    fn reset(&mut self) {
        for (w, b) in &mut self.layers {
            w.iter_mut().for_each(|v| *v = T::zero());
            b.iter_mut().for_each(|v| *v = T::zero());
        }
        self.null_content.iter_mut().for_each(|v| *v = T::zero());
        self.null_style.iter_mut().for_each(|v| *v = T::zero());
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for (w, b) in &mut self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.null_content);
        out.push(&mut self.null_style);
        out
    }
}

fn param_slices_mut<T>(model: &mut TrainedDenoiser<T>) -> Vec<&mut [T]> {
    let mut out: Vec<&mut [T]> = Vec::new();
    for layer in &mut model.layers {
        out.push(&mut layer.weights);
        out.push(&mut layer.bias);
    }
    out.push(&mut model.null_content);
    out.push(&mut model.null_style);
    out
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &mut TrainedDenoiser<T>) -> Self {
        let shapes: Vec<usize> = param_slices_mut(model).iter().map(|s| s.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&mut [T]>, lr: T) {
        self.step += 1;
        let (b1, b2) = (T::of(Self::BETA1), T::of(Self::BETA2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + T::of(Self::EPS));
            }
        }
    }
}

/// Accumulates the gradient of `0.5 * scale * ||out - target||^2` into `grads`.
fn backward<T: Scalar>(
    model: &TrainedDenoiser<T>,
    acts: &Activations<T>,
    output: &[T],
    target: &[T],
    scale: T,
    dropped: bool,
    grads: &mut Grads<T>,
) {
    let mut delta: Vec<T> = output
        .iter()
        .zip(target)
        .map(|(&o, &y)| scale * (o - y))
        .collect();
    for (i, layer) in model.layers.iter().enumerate().rev() {
        let input = &acts.inputs[i];
        let (gw, gb) = &mut grads.layers[i];
        for (o, &d) in delta.iter().enumerate() {
            gb[o] = gb[o] + d;
            let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
            for (g, &x) in row.iter_mut().zip(input) {
                *g = *g + d * x;
            }
        }
        let mut prev = vec![T::zero(); layer.inputs];
        for (o, &d) in delta.iter().enumerate() {
            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
            for (p, &w) in prev.iter_mut().zip(row) {
                *p = *p + w * d;
            }
        }
        if i > 0 {
            let pre = &acts.pre[i - 1];
            for (p, &z) in prev.iter_mut().zip(pre) {
                *p = *p * silu_grad(z);
            }
        } else if dropped {
            let offset = model.sample_dim + model.time_features;
            let (content, style) = prev[offset..].split_at(model.content_dim);
            for (g, &d) in grads.null_content.iter_mut().zip(content) {
                *g = *g + d;
            }
            for (g, &d) in grads.null_style.iter_mut().zip(style) {
                *g = *g + d;
            }
        }
        delta = prev;
    }
}

/// Trains an ε-predictor by minimizing the mean squared noise error over
/// uniformly drawn timesteps, replacing the condition by the null condition
/// with probability `cond_dropout_prob`. Single-threaded and deterministic
/// given `cfg.seed`.
pub fn train_toy_denoiser<T: Scalar>(
    dataset: &[TrainingExample<T>],
    schedule: &DiffusionSchedule<T>,
    cfg: &TrainingConfig,
) -> Result<(TrainedDenoiser<T>, TrainingReport<T>)> {
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::config("dataset", "must contain at least one example"))?;
    let (sample_dim, content_dim, style_dim) = (
        first.x0.len(),
        first.cond.content.len(),
        first.cond.style.len(),
    );
    if sample_dim == 0 || content_dim == 0 || style_dim == 0 {
        return Err(Error::config(
            "dataset",
            "examples must have nonempty vectors",
        ));
    }
    for ex in dataset {
        if ex.x0.len() != sample_dim
            || ex.cond.content.len() != content_dim
            || ex.cond.style.len() != style_dim
        {
            return Err(Error::config(
                "dataset",
                "examples have inconsistent dimensions",
            ));
        }
    }

    let mut rng = rng::seeded(cfg.seed);
    let mut model = TrainedDenoiser::init(
        sample_dim,
        content_dim,
        style_dim,
        schedule.num_steps(),
        &cfg.architecture,
        cfg.cond_dropout_prob > 0.0,
        &mut rng,
    );
    let mut adam = Adam::new(&mut model);
    let mut grads = Grads::zeros_like(&model);
    let num_steps = schedule.num_steps();
    let dropout = T::of(cfg.cond_dropout_prob);
    let base_lr = cfg.learning_rate;
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_batches = (batches_per_epoch * cfg.epochs) as f64;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_index = 0usize;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = T::zero();
        for batch in order.chunks(cfg.batch_size) {
            grads.reset();
            let scale = T::of(2.0) / T::of_usize(batch.len() * sample_dim);
            for &idx in batch {
                let ex = &dataset[idx];
                let t = rng.random_range(1..=num_steps);
                let ab = schedule.alpha_bar(t)?;
                let (sa, so) = (ab.sqrt(), (T::one() - ab).sqrt());
                let eps: Vec<T> = (0..sample_dim)
                    .map(|_| T::standard_normal(&mut rng))
                    .collect();
                let x_t: Vec<T> = ex
                    .x0
                    .iter()
                    .zip(&eps)
                    .map(|(&x, &e)| sa * x + so * e)
                    .collect();
                let dropped = T::unit_uniform(&mut rng) < dropout;
                let cond = if dropped {
                    Condition::Null
                } else {
                    Condition::Pair(ex.cond.clone())
                };
                let input = model.network_input(&x_t, t, &cond)?;
                let (out, acts) = model.forward(input);
                let sq: T = out.iter().zip(&eps).map(|(&o, &e)| (o - e) * (o - e)).sum();
                epoch_loss = epoch_loss + sq / T::of_usize(sample_dim);
                backward(&model, &acts, &out, &eps, scale, dropped, &mut grads);
            }
            // cosine decay to a tenth of the base rate
            let progress = batch_index as f64 / total_batches;
            let lr = base_lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            adam.update(param_slices_mut(&mut model), grads.slices_mut(), T::of(lr));
            batch_index += 1;
        }
        let mean = epoch_loss / T::of_usize(dataset.len());
        if !mean.is_finite() {
            return Err(Error::NonFinite {
                step: epoch_losses.len(),
                strategy: "training".into(),
            });
        }
        epoch_losses.push(mean);
    }
    Ok((model, TrainingReport { epoch_losses }))
}
