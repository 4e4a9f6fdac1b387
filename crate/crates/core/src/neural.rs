//! Small dense-network kernels with hand-written gradients.
//!
//! Everything is `f64`. Parameter containers implement [`Parameters`], which
//! exposes their storage as flat slices so the optimizer and the
//! finite-difference checker can treat any model uniformly. A gradient is
//! stored in a value of the same type as the model it differentiates.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative in terms of the pre-activation `x` and output `y`.
    /// The relu subgradient at zero is taken as zero.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trainable storage viewed as a list of flat slices.
pub trait Parameters: Clone {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// A same-shaped value with every parameter set to zero.
    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for s in z.param_slices_mut() {
            s.fill(0.0);
        }
        z
    }

    /// `self += scale * other`, slice by slice.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// `y = activation(W x + b)` with `W` stored row-major as `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weights: Vec<f64>,
    bias: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub output: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn from_parts(
        weights: Vec<f64>,
        bias: Vec<f64>,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "layer {out_dim}x{in_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        let layer = DenseLayer {
            weights,
            bias,
            in_dim,
            out_dim,
            activation,
        };
        if !layer.all_finite() {
            return Err(Error::Numeric("layer parameters must be finite".into()));
        }
        Ok(layer)
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        DenseLayer {
            weights,
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
            activation,
        }
    }

    /// He-uniform weights for relu layers, zero bias.
    pub fn he(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        DenseLayer {
            weights,
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
            activation,
        }
    }

    /// Every parameter uniform in `[-scale, scale]`.
    pub fn random_uniform(in_dim: usize, out_dim: usize, activation: Activation, scale: f64, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        for s in layer.param_slices_mut() {
            for x in s {
                *x = rng.random_range(-scale..=scale);
            }
        }
        layer
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    /// Pre-activation `W x + b`.
    pub fn affine(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "layer expects input of length {}, got {}",
                self.in_dim,
                input.len()
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
        let pre = self.affine(input)?;
        let output: Vec<f64> = pre.iter().map(|&z| self.activation.apply(z)).collect();
        Ok((
            output.clone(),
            DenseCache {
                input: input.to_vec(),
                pre_activation: pre,
                output,
            },
        ))
    }

    /// Backpropagates `upstream` (d loss / d output), adding parameter
    /// gradients into `grad` and returning d loss / d input.
    pub fn backward_into(&self, cache: &DenseCache, upstream: &[f64], grad: &mut DenseLayer) -> Result<Vec<f64>> {
        if upstream.len() != self.out_dim || cache.input.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "backward through {}x{} layer given upstream {} and cached input {}",
                self.out_dim,
                self.in_dim,
                upstream.len(),
                cache.input.len()
            )));
        }
        if grad.in_dim != self.in_dim || grad.out_dim != self.out_dim {
            return Err(Error::Shape("gradient layer shape differs from layer".into()));
        }
        let delta: Vec<f64> = upstream
            .iter()
            .zip(cache.pre_activation.iter().zip(&cache.output))
            .map(|(g, (&z, &y))| g * self.activation.derivative(z, y))
            .collect();
        Ok(self.backward_linear(&cache.input, &delta, grad))
    }

    /// Backward pass through the affine part only, given d loss / d pre-activation.
    pub(crate) fn backward_linear(&self, input: &[f64], delta: &[f64], grad: &mut DenseLayer) -> Vec<f64> {
        let mut input_grad = vec![0.0; self.in_dim];
        for (o, &dz) in delta.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            grad.bias[o] += dz;
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += dz * input[i];
                input_grad[i] += row[i] * dz;
            }
        }
        input_grad
    }

    pub fn to_record(&self, name: &str) -> LayerRecord {
        LayerRecord {
            name: name.to_string(),
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            activation: self.activation,
        }
    }

    pub fn from_record(record: &LayerRecord) -> Result<Self> {
        Self::from_parts(
            record.weights.clone(),
            record.bias.clone(),
            record.in_dim,
            record.out_dim,
            record.activation,
        )
    }
}

impl Parameters for DenseLayer {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![&self.weights, &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Forward pass of a single layer.
pub fn dense_forward(layer: &DenseLayer, input: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
    layer.forward(input)
}

/// Backward pass of a single layer: `(input gradient, parameter gradients)`.
pub fn dense_backward(layer: &DenseLayer, cache: &DenseCache, upstream: &[f64]) -> Result<(Vec<f64>, DenseLayer)> {
    let mut grad = layer.zeroed();
    let input_grad = layer.backward_into(cache, upstream, &mut grad)?;
    Ok((input_grad, grad))
}

/// Class-weighted binary cross entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub positive_weight: f64,
}

impl LossSpec {
    pub fn new(positive_weight: f64) -> Result<Self> {
        if !(positive_weight >= 1.0 && positive_weight.is_finite()) {
            return Err(Error::config("positive_weight", "must be finite and at least 1"));
        }
        Ok(LossSpec { positive_weight })
    }

    pub fn unweighted() -> Self {
        LossSpec {
            positive_weight: 1.0,
        }
    }

    pub fn evaluate(&self, probability: f64, label: u8) -> (f64, f64) {
        weighted_bce(probability, label, self.positive_weight)
    }
}

/// `-w y ln p - (1 - y) ln(1 - p)` and its derivative in `p`, both evaluated
/// at `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce(probability: f64, label: u8, positive_weight: f64) -> (f64, f64) {
    let p = probability.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        (-positive_weight * p.ln(), -positive_weight / p)
    } else {
        (-(1.0 - p).ln(), 1.0 / (1.0 - p))
    }
}

/// Unweighted binary cross entropy, for comparison.
pub fn bce(probability: f64, label: u8) -> f64 {
    let p = probability.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = label as f64;
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for bias-corrected adaptive-moment updates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape("parameter and gradient shapes differ".into()));
    }
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    } else if state.first_moment.len() != params.len()
        || state.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
    {
        return Err(Error::Shape("optimizer state shape differs from parameters".into()));
    }
    let AdamConfig {
        step_size,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= step_size * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Applies one optimizer step to a whole parameter container.
pub fn adam_update<M: Parameters>(model: &mut M, grad: &M, state: &mut OptimizerState) -> Result<()> {
    let grads = grad.param_slices();
    let mut params = model.param_slices_mut();
    adam_step(&mut params, &grads, state)
}

/// Largest relative gap between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub parameters_checked: usize,
}

/// Compares the analytic gradient returned by `loss_and_grad` with
/// `(L(theta + h) - L(theta - h)) / 2h` for every parameter. The relative
/// error of one parameter is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<M, F>(model: &M, h: f64, loss_and_grad: F) -> Result<GradCheckReport>
where
    M: Parameters,
    F: Fn(&M) -> Result<(f64, M)>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::config("h", "must lie in [1e-7, 1e-3]"));
    }
    let (loss, analytic) = loss_and_grad(model)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    let analytic: Vec<f64> = analytic.param_slices().concat();
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: 0,
        parameters_checked: analytic.len(),
    };
    let mut flat = 0;
    let n_slices = probe.param_slices().len();
    for s in 0..n_slices {
        let len = probe.param_slices()[s].len();
        for i in 0..len {
            let original = probe.param_slices()[s][i];
            probe.param_slices_mut()[s][i] = original + h;
            let plus = loss_and_grad(&probe)?.0;
            probe.param_slices_mut()[s][i] = original - h;
            let minus = loss_and_grad(&probe)?.0;
            probe.param_slices_mut()[s][i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric("perturbed loss is not finite".into()));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_parameter = flat;
            }
            flat += 1;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Parameter file

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// JSON parameter file. Optimizer state is not stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub model_kind: String,
    pub dims: BTreeMap<String, usize>,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traveler_embedding_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
}

impl ModelFile {
    pub fn layer(&self, name: &str) -> Result<&LayerRecord> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Invalid(format!("model file has no layer {name:?}")))
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        self.dims
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("model file has no dim {name:?}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_json()?.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported model format_version {}",
                file.format_version
            )));
        }
        Ok(file)
    }
}
