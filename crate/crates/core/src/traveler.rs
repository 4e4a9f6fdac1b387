//! Traveler embeddings from the listings a traveler viewed.
//!
//! Five encoders share one interface: a random pick and a plain mean of the
//! viewed listing vectors (baselines), a Deep Average Network, an LSTM, and
//! an LSTM with attention over its hidden states. The trainable ones end in a
//! logistic booking head and are fit with class-weighted cross entropy; the
//! traveler embedding is the activation that feeds that head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, SessionCorpus};
use crate::error::{Error, Result};
use crate::neural::{
    adam_update, Activation, AdamConfig, DenseCache, DenseLayer, LayerRecord, LossSpec,
    ModelFile, OptimizerState, Parameters, MODEL_FORMAT_VERSION,
};
use crate::rng::seeded;
use crate::skipgram::KeyedVectors;

/// Most recent views kept per prefix.
pub const DEFAULT_MAX_PREFIX: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Random,
    Average,
    Dan,
    Lstm,
    LstmAttention,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Random,
        ModelKind::Average,
        ModelKind::Dan,
        ModelKind::Lstm,
        ModelKind::LstmAttention,
    ];
    pub const TRAINABLE: [ModelKind; 4] = [
        ModelKind::Average,
        ModelKind::Dan,
        ModelKind::Lstm,
        ModelKind::LstmAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Random => "random",
            ModelKind::Average => "average",
            ModelKind::Dan => "dan",
            ModelKind::Lstm => "lstm",
            ModelKind::LstmAttention => "lstm_attention",
        }
    }

    pub fn is_trainable(self) -> bool {
        self != ModelKind::Random
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = ModelKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::config("kind", format!("unknown kind {s:?}; valid kinds: {}", valid.join(", ")))
            })
    }
}

/// Viewed listing vectors and the booking label of one session prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct TravelerExample {
    pub traveler_key: String,
    pub viewed: Vec<Vec<f64>>,
    pub label: u8,
}

impl TravelerExample {
    pub fn new(traveler_key: impl Into<String>, viewed: Vec<Vec<f64>>, label: u8) -> Result<Self> {
        if viewed.is_empty() {
            return Err(Error::Invalid("traveler example has no viewed listings".into()));
        }
        let d = viewed[0].len();
        if viewed.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("viewed vectors differ in length".into()));
        }
        if label > 1 {
            return Err(Error::Invalid(format!("label must be 0 or 1, got {label}")));
        }
        Ok(TravelerExample {
            traveler_key: traveler_key.into(),
            viewed,
            label,
        })
    }
}

/// A session's views before its booking, with the booking label.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionPrefix {
    pub traveler_key: String,
    /// Every view before the booking, in time order.
    pub views: Vec<Interaction>,
    pub label: u8,
}

impl SessionPrefix {
    /// Vectors of the most recent `max_prefix` views that have an embedding.
    pub fn embedded_views(&self, vectors: &KeyedVectors, max_prefix: usize) -> Vec<Vec<f64>> {
        let known: Vec<&[f64]> = self
            .views
            .iter()
            .filter_map(|i| vectors.get(&i.listing_key))
            .collect();
        let skip = known.len().saturating_sub(max_prefix);
        known[skip..].iter().map(|v| v.to_vec()).collect()
    }

    pub fn to_example(&self, vectors: &KeyedVectors, max_prefix: usize) -> Result<TravelerExample> {
        TravelerExample::new(
            self.traveler_key.clone(),
            self.embedded_views(vectors, max_prefix),
            self.label,
        )
    }
}

/// One prefix per session that has at least one embedded view.
pub fn session_prefixes(corpus: &SessionCorpus, vectors: &KeyedVectors) -> Vec<SessionPrefix> {
    corpus
        .sessions()
        .iter()
        .filter_map(|s| {
            let views: Vec<Interaction> = s.view_prefix().into_iter().cloned().collect();
            if !views.iter().any(|v| vectors.index(&v.listing_key).is_some()) {
                return None;
            }
            Some(SessionPrefix {
                traveler_key: s.traveler_key().to_string(),
                views,
                label: s.has_booking() as u8,
            })
        })
        .collect()
}

pub fn examples_from_prefixes(
    prefixes: &[SessionPrefix],
    vectors: &KeyedVectors,
    max_prefix: usize,
) -> Result<Vec<TravelerExample>> {
    prefixes.iter().map(|p| p.to_example(vectors, max_prefix)).collect()
}

/// Coordinate-wise mean.
pub fn pool_average(viewed: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = viewed
        .first()
        .ok_or_else(|| Error::Invalid("cannot pool an empty sequence".into()))?;
    let mut sum = vec![0.0; first.len()];
    for v in viewed {
        if v.len() != sum.len() {
            return Err(Error::Shape("viewed vectors differ in length".into()));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = viewed.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// One of the viewed vectors, chosen uniformly.
pub fn baseline_random(viewed: &[Vec<f64>], rng: &mut impl Rng) -> Result<Vec<f64>> {
    if viewed.is_empty() {
        return Err(Error::Invalid("cannot pick from an empty sequence".into()));
    }
    Ok(viewed[rng.random_range(0..viewed.len())].clone())
}

fn check_input(viewed: &[Vec<f64>], d: usize) -> Result<()> {
    if viewed.is_empty() {
        return Err(Error::Invalid("empty prefix".into()));
    }
    if viewed.iter().any(|v| v.len() != d) {
        return Err(Error::Shape(format!("model expects {d}-dim listing vectors")));
    }
    Ok(())
}

/// A booking model over a sequence of listing vectors.
pub trait SequenceModel: Parameters {
    fn kind(&self) -> ModelKind;
    fn input_dim(&self) -> usize;
    fn embedding_dim(&self) -> usize;

    /// Booking probability and traveler embedding.
    fn predict(&self, viewed: &[Vec<f64>]) -> Result<(f64, Vec<f64>)>;

    /// Weighted cross-entropy of one example; adds its gradient into `grad`.
    fn loss_and_grad(&self, example: &TravelerExample, loss: &LossSpec, grad: &mut Self) -> Result<f64>;
}

fn head_loss(head: &DenseLayer, features: &[f64], label: u8, loss: &LossSpec, grad: &mut DenseLayer) -> Result<(f64, Vec<f64>)> {
    let (p, cache) = head.forward(features)?;
    let (value, dp) = loss.evaluate(p[0], label);
    let d_features = head.backward_into(&cache, &[dp], grad)?;
    Ok((value, d_features))
}

// ---------------------------------------------------------------------------
// Averaging

/// Logistic head over the mean viewed vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AverageModel {
    pub head: DenseLayer,
}

impl AverageModel {
    pub fn new(input_dim: usize, rng: &mut impl Rng) -> Self {
        AverageModel {
            head: DenseLayer::glorot(input_dim, 1, Activation::Sigmoid, rng),
        }
    }
}

impl Parameters for AverageModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.head.param_slices()
    }
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.head.param_slices_mut()
    }
}

impl SequenceModel for AverageModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Average
    }
    fn input_dim(&self) -> usize {
        self.head.in_dim()
    }
    fn embedding_dim(&self) -> usize {
        self.head.in_dim()
    }

    fn predict(&self, viewed: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        check_input(viewed, self.input_dim())?;
        let pooled = pool_average(viewed)?;
        let (p, _) = self.head.forward(&pooled)?;
        Ok((p[0], pooled))
    }

    fn loss_and_grad(&self, example: &TravelerExample, loss: &LossSpec, grad: &mut Self) -> Result<f64> {
        check_input(&example.viewed, self.input_dim())?;
        let pooled = pool_average(&example.viewed)?;
        Ok(head_loss(&self.head, &pooled, example.label, loss, &mut grad.head)?.0)
    }
}

// ---------------------------------------------------------------------------
// Deep Average Network

/// Mean-pooled input, one widening relu layer, two narrowing relu layers and
/// a logistic head:
///
/// ```text
/// pooled = mean(v_1..v_t)
/// h2 = relu(W3 pooled + b3)      d   -> d_h2 (d_h2 > d)
/// h1 = relu(W2 h2 + b2)          d_h2 -> d_h1 (d_h1 <= d)
/// f  = relu(W1 h1 + b1)          d_h1 -> d_f  (d_f < d_h1)
/// p  = sigmoid(w . f + b)
/// ```
///
/// The chain runs pool -> h2 -> h1 -> f; `f` is the traveler embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct DanModel {
    pub project: DenseLayer,
    pub hidden: DenseLayer,
    pub embed: DenseLayer,
    pub head: DenseLayer,
}

#[derive(Clone, Debug)]
pub struct DanCaches {
    pub pooled: Vec<f64>,
    pub project: DenseCache,
    pub hidden: DenseCache,
    pub embed: DenseCache,
    pub head: DenseCache,
}

fn check_dan_dims(d: usize, dims: &TravelerDims) -> Result<()> {
    if !(dims.expand > d && d >= dims.hidden && dims.hidden > dims.embedding && dims.embedding >= 1) {
        return Err(Error::config(
            "dims",
            format!(
                "DAN needs expand > input >= hidden > embedding >= 1, got {} > {d} >= {} > {}",
                dims.expand, dims.hidden, dims.embedding
            ),
        ));
    }
    Ok(())
}

fn relu_layer(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> DenseLayer {
    let mut l = DenseLayer::he(in_dim, out_dim, Activation::Relu, rng);
    l.bias_mut().fill(0.01);
    l
}

impl DanModel {
    pub fn zeros(input_dim: usize, dims: &TravelerDims) -> Result<Self> {
        check_dan_dims(input_dim, dims)?;
        Ok(DanModel {
            project: DenseLayer::zeros(input_dim, dims.expand, Activation::Relu),
            hidden: DenseLayer::zeros(dims.expand, dims.hidden, Activation::Relu),
            embed: DenseLayer::zeros(dims.hidden, dims.embedding, Activation::Relu),
            head: DenseLayer::zeros(dims.embedding, 1, Activation::Sigmoid),
        })
    }

    pub fn new(input_dim: usize, dims: &TravelerDims, rng: &mut impl Rng) -> Result<Self> {
        check_dan_dims(input_dim, dims)?;
        Ok(DanModel {
            project: relu_layer(input_dim, dims.expand, rng),
            hidden: relu_layer(dims.expand, dims.hidden, rng),
            embed: relu_layer(dims.hidden, dims.embedding, rng),
            head: DenseLayer::glorot(dims.embedding, 1, Activation::Sigmoid, rng),
        })
    }

    fn layers_mut(&mut self) -> [&mut DenseLayer; 4] {
        [&mut self.project, &mut self.hidden, &mut self.embed, &mut self.head]
    }
}

/// Forward pass: `(probability, traveler embedding f, caches)`.
pub fn dan_forward(params: &DanModel, viewed: &[Vec<f64>]) -> Result<(f64, Vec<f64>, DanCaches)> {
    check_input(viewed, params.project.in_dim())?;
    let pooled = pool_average(viewed)?;
    let (h2, project) = params.project.forward(&pooled)?;
    let (h1, hidden) = params.hidden.forward(&h2)?;
    let (f, embed) = params.embed.forward(&h1)?;
    let (p, head) = params.head.forward(&f)?;
    Ok((
        p[0],
        f,
        DanCaches {
            pooled,
            project,
            hidden,
            embed,
            head,
        },
    ))
}

impl Parameters for DanModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        [&self.project, &self.hidden, &self.embed, &self.head]
            .into_iter()
            .flat_map(|l| l.param_slices())
            .collect()
    }
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }
}

impl SequenceModel for DanModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Dan
    }
    fn input_dim(&self) -> usize {
        self.project.in_dim()
    }
    fn embedding_dim(&self) -> usize {
        self.embed.out_dim()
    }

    fn predict(&self, viewed: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let (p, f, _) = dan_forward(self, viewed)?;
        Ok((p, f))
    }

    fn loss_and_grad(&self, example: &TravelerExample, loss: &LossSpec, grad: &mut Self) -> Result<f64> {
        let (p, _, c) = dan_forward(self, &example.viewed)?;
        let (value, dp) = loss.evaluate(p, example.label);
        let df = self.head.backward_into(&c.head, &[dp], &mut grad.head)?;
        let dh1 = self.embed.backward_into(&c.embed, &df, &mut grad.embed)?;
        let dh2 = self.hidden.backward_into(&c.hidden, &dh1, &mut grad.hidden)?;
        self.project.backward_into(&c.project, &dh2, &mut grad.project)?;
        Ok(value)
    }
}

// ---------------------------------------------------------------------------
// LSTM

/// Four-gate LSTM cell over `z_t = [h_{t-1}, v_t]`:
///
/// ```text
/// f = sigmoid(W_f z + b_f)   i = sigmoid(W_i z + b_i)   o = sigmoid(W_o z + b_o)
/// g = tanh(W_c z + b_c)      c_t = f * c_{t-1} + i * g  h_t = o * tanh(c_t)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub forget: DenseLayer,
    pub input: DenseLayer,
    pub output: DenseLayer,
    pub candidate: DenseLayer,
}

#[derive(Clone, Debug)]
pub struct LstmStep {
    pub z: Vec<f64>,
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub candidate: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let n = hidden + input_dim;
        LstmCell {
            forget: DenseLayer::zeros(n, hidden, Activation::Sigmoid),
            input: DenseLayer::zeros(n, hidden, Activation::Sigmoid),
            output: DenseLayer::zeros(n, hidden, Activation::Sigmoid),
            candidate: DenseLayer::zeros(n, hidden, Activation::Tanh),
        }
    }

    /// Glorot gates, forget bias 1.
    pub fn new(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let n = hidden + input_dim;
        let mut forget = DenseLayer::glorot(n, hidden, Activation::Sigmoid, rng);
        forget.bias_mut().fill(1.0);
        LstmCell {
            forget,
            input: DenseLayer::glorot(n, hidden, Activation::Sigmoid, rng),
            output: DenseLayer::glorot(n, hidden, Activation::Sigmoid, rng),
            candidate: DenseLayer::glorot(n, hidden, Activation::Tanh, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.forget.out_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.forget.in_dim() - self.hidden_dim()
    }

    fn gates(&self) -> [&DenseLayer; 4] {
        [&self.forget, &self.input, &self.output, &self.candidate]
    }

    fn gates_mut(&mut self) -> [&mut DenseLayer; 4] {
        [&mut self.forget, &mut self.input, &mut self.output, &mut self.candidate]
    }

    /// Runs the recurrence from `h_0 = c_0 = 0`.
    pub fn run(&self, viewed: &[Vec<f64>]) -> Result<Vec<LstmStep>> {
        check_input(viewed, self.input_dim())?;
        let hd = self.hidden_dim();
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut steps = Vec::with_capacity(viewed.len());
        for v in viewed {
            let mut z = h.clone();
            z.extend_from_slice(v);
            let forget = self.forget.forward(&z)?.0;
            let input = self.input.forward(&z)?.0;
            let output = self.output.forward(&z)?.0;
            let candidate = self.candidate.forward(&z)?.0;
            let c_new: Vec<f64> = (0..hd)
                .map(|k| forget[k] * c[k] + input[k] * candidate[k])
                .collect();
            let tanh_c: Vec<f64> = c_new.iter().map(|x| x.tanh()).collect();
            h = (0..hd).map(|k| output[k] * tanh_c[k]).collect();
            steps.push(LstmStep {
                z,
                forget,
                input,
                output,
                candidate,
                c_prev: std::mem::replace(&mut c, c_new.clone()),
                c: c_new,
                tanh_c,
                h: h.clone(),
            });
        }
        Ok(steps)
    }

    /// Backpropagation through time. `dh_external[t]` is the loss gradient
    /// arriving at `h_t` from outside the recurrence.
    pub fn backward(&self, steps: &[LstmStep], dh_external: &[Vec<f64>], grad: &mut LstmCell) -> Result<()> {
        if steps.len() != dh_external.len() {
            return Err(Error::Shape("one external gradient per step required".into()));
        }
        let hd = self.hidden_dim();
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        for (s, dh_ext) in steps.iter().zip(dh_external).rev() {
            let mut d_forget = vec![0.0; hd];
            let mut d_input = vec![0.0; hd];
            let mut d_output = vec![0.0; hd];
            let mut d_candidate = vec![0.0; hd];
            for k in 0..hd {
                let dh = dh_ext[k] + dh_next[k];
                let dc = dh * s.output[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];
                let (f, i, o, g) = (s.forget[k], s.input[k], s.output[k], s.candidate[k]);
                d_output[k] = dh * s.tanh_c[k] * o * (1.0 - o);
                d_forget[k] = dc * s.c_prev[k] * f * (1.0 - f);
                d_input[k] = dc * g * i * (1.0 - i);
                d_candidate[k] = dc * i * (1.0 - g * g);
                dc_next[k] = dc * f;
            }
            let mut dz = vec![0.0; s.z.len()];
            let deltas = [&d_forget, &d_input, &d_output, &d_candidate];
            for ((layer, g), delta) in self.gates().into_iter().zip(grad.gates_mut()).zip(deltas) {
                for (a, b) in dz.iter_mut().zip(layer.backward_linear(&s.z, delta, g)) {
                    *a += b;
                }
            }
            dh_next.copy_from_slice(&dz[..hd]);
        }
        Ok(())
    }
}

impl Parameters for LstmCell {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.gates().into_iter().flat_map(|l| l.param_slices()).collect()
    }
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.gates_mut()
            .into_iter()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }
}

/// LSTM whose last hidden state feeds the booking head.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmModel {
    pub cell: LstmCell,
    pub head: DenseLayer,
}

impl LstmModel {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmModel {
            cell: LstmCell::zeros(input_dim, hidden),
            head: DenseLayer::zeros(hidden, 1, Activation::Sigmoid),
        }
    }

    pub fn new(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        LstmModel {
            cell: LstmCell::new(input_dim, hidden, rng),
            head: DenseLayer::glorot(hidden, 1, Activation::Sigmoid, rng),
        }
    }
}

/// Forward pass: `(probability, h_T, per-step caches)`.
pub fn lstm_forward(params: &LstmModel, viewed: &[Vec<f64>]) -> Result<(f64, Vec<f64>, Vec<LstmStep>)> {
    let steps = params.cell.run(viewed)?;
    let h_last = steps.last().expect("non-empty").h.clone();
    let (p, _) = params.head.forward(&h_last)?;
    Ok((p[0], h_last, steps))
}

impl Parameters for LstmModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.cell.param_slices();
        v.extend(self.head.param_slices());
        v
    }
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.cell.param_slices_mut();
        v.extend(self.head.param_slices_mut());
        v
    }
}

impl SequenceModel for LstmModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Lstm
    }
    fn input_dim(&self) -> usize {
        self.cell.input_dim()
    }
    fn embedding_dim(&self) -> usize {
        self.cell.hidden_dim()
    }

    fn predict(&self, viewed: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let (p, h, _) = lstm_forward(self, viewed)?;
        Ok((p, h))
    }

    fn loss_and_grad(&self, example: &TravelerExample, loss: &LossSpec, grad: &mut Self) -> Result<f64> {
        let (_, h_last, steps) = lstm_forward(self, &example.viewed)?;
        let (value, dh) = head_loss(&self.head, &h_last, example.label, loss, &mut grad.head)?;
        let hd = self.cell.hidden_dim();
        let mut external = vec![vec![0.0; hd]; steps.len()];
        *external.last_mut().expect("non-empty") = dh;
        self.cell.backward(&steps, &external, &mut grad.cell)?;
        Ok(value)
    }
}

// ---------------------------------------------------------------------------
// Attention over LSTM states

/// `e_t = w . tanh(h_t)`, `alpha = softmax(e)`, `context = sum alpha_t h_t`.
/// Returns `(context, alpha)`.
pub fn attention_combine(score_vector: &[f64], hidden: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if hidden.is_empty() {
        return Err(Error::Invalid("attention over an empty sequence".into()));
    }
    let hd = score_vector.len();
    if hidden.iter().any(|h| h.len() != hd) {
        return Err(Error::Shape(format!("hidden states must have {hd} dims")));
    }
    let scores: Vec<f64> = hidden
        .iter()
        .map(|h| h.iter().zip(score_vector).map(|(x, w)| w * x.tanh()).sum())
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let alpha: Vec<f64> = exp.iter().map(|e| e / total).collect();
    let mut context = vec![0.0; hd];
    for (a, h) in alpha.iter().zip(hidden) {
        for (c, x) in context.iter_mut().zip(h) {
            *c += a * x;
        }
    }
    Ok((context, alpha))
}

/// LSTM, attention over all hidden states, logistic head on the context.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModel {
    pub cell: LstmCell,
    pub score: Vec<f64>,
    pub head: DenseLayer,
}

impl AttentionModel {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        AttentionModel {
            cell: LstmCell::zeros(input_dim, hidden),
            score: vec![0.0; hidden],
            head: DenseLayer::zeros(hidden, 1, Activation::Sigmoid),
        }
    }

    pub fn new(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / hidden as f64).sqrt();
        AttentionModel {
            cell: LstmCell::new(input_dim, hidden, rng),
            score: (0..hidden).map(|_| rng.random_range(-bound..bound)).collect(),
            head: DenseLayer::glorot(hidden, 1, Activation::Sigmoid, rng),
        }
    }

    /// `(probability, context, attention weights)`.
    pub fn forward(&self, viewed: &[Vec<f64>]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let steps = self.cell.run(viewed)?;
        let hidden: Vec<Vec<f64>> = steps.into_iter().map(|s| s.h).collect();
        let (context, alpha) = attention_combine(&self.score, &hidden)?;
        let (p, _) = self.head.forward(&context)?;
        Ok((p[0], context, alpha))
    }
}

impl Parameters for AttentionModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.cell.param_slices();
        v.push(&self.score);
        v.extend(self.head.param_slices());
        v
    }
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.cell.param_slices_mut();
        v.push(&mut self.score);
        v.extend(self.head.param_slices_mut());
        v
    }
}

impl SequenceModel for AttentionModel {
    fn kind(&self) -> ModelKind {
        ModelKind::LstmAttention
    }
    fn input_dim(&self) -> usize {
        self.cell.input_dim()
    }
    fn embedding_dim(&self) -> usize {
        self.cell.hidden_dim()
    }

    fn predict(&self, viewed: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let (p, context, _) = self.forward(viewed)?;
        Ok((p, context))
    }

    fn loss_and_grad(&self, example: &TravelerExample, loss: &LossSpec, grad: &mut Self) -> Result<f64> {
        let steps = self.cell.run(&example.viewed)?;
        let hidden: Vec<&[f64]> = steps.iter().map(|s| s.h.as_slice()).collect();
        let owned: Vec<Vec<f64>> = hidden.iter().map(|h| h.to_vec()).collect();
        let (context, alpha) = attention_combine(&self.score, &owned)?;
        let (value, d_context) = head_loss(&self.head, &context, example.label, loss, &mut grad.head)?;

        let hd = self.cell.hidden_dim();
        // d e_t = alpha_t (d alpha_t - sum_j alpha_j d alpha_j), d alpha_t = d_context . h_t
        let d_alpha: Vec<f64> = hidden
            .iter()
            .map(|h| h.iter().zip(&d_context).map(|(a, b)| a * b).sum())
            .collect();
        let mean: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let mut external = Vec::with_capacity(steps.len());
        for (t, h) in hidden.iter().enumerate() {
            let de = alpha[t] * (d_alpha[t] - mean);
            let mut dh = vec![0.0; hd];
            for k in 0..hd {
                let s = h[k].tanh();
                grad.score[k] += de * s;
                dh[k] = alpha[t] * d_context[k] + de * self.score[k] * (1.0 - s * s);
            }
            external.push(dh);
        }
        self.cell.backward(&steps, &external, &mut grad.cell)?;
        Ok(value)
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TravelerDims {
    /// DAN widening layer.
    pub expand: usize,
    /// DAN narrowing layer.
    pub hidden: usize,
    /// DAN traveler-embedding width.
    pub embedding: usize,
    /// LSTM hidden width (also the LSTM traveler-embedding width).
    pub lstm_hidden: usize,
}

impl Default for TravelerDims {
    fn default() -> Self {
        TravelerDims {
            expand: 64,
            hidden: 16,
            embedding: 8,
            lstm_hidden: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TravelerConfig {
    pub dims: TravelerDims,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of positive examples; `None` uses negatives / positives of the
    /// training set (at least 1).
    pub positive_weight: Option<f64>,
    pub learning_rate: f64,
    pub max_prefix: usize,
    pub seed: u64,
}

impl Default for TravelerConfig {
    fn default() -> Self {
        TravelerConfig {
            dims: TravelerDims::default(),
            epochs: 20,
            batch_size: 64,
            positive_weight: None,
            learning_rate: 1e-3,
            max_prefix: DEFAULT_MAX_PREFIX,
            seed: 1,
        }
    }
}

impl TravelerConfig {
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
        if self.max_prefix == 0 {
            return Err(Error::config("max_prefix", "must be at least 1"));
        }
        if self.dims.lstm_hidden == 0 {
            return Err(Error::config("dims.lstm_hidden", "must be at least 1"));
        }
        if let Some(w) = self.positive_weight {
            LossSpec::new(w)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u128,
}

/// `epoch <TAB> mean_loss <TAB> wall_ms` lines.
pub fn format_loss_trace(trace: &[EpochLog]) -> String {
    trace
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.epoch, e.mean_loss, e.wall_ms))
        .collect()
}

/// `negatives / positives`, floored at 1; errors when a class is missing.
pub fn default_positive_weight(examples: &[TravelerExample]) -> Result<f64> {
    let pos = examples.iter().filter(|e| e.label == 1).count();
    let neg = examples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{pos} positive and {neg} negative training examples"
        )));
    }
    Ok((neg as f64 / pos as f64).max(1.0))
}

/// Mini-batch training with the adaptive-moment optimizer. Batch gradients
/// are means over the batch; the example order is reshuffled every epoch.
pub fn fit<M: SequenceModel>(
    mut model: M,
    examples: &[TravelerExample],
    config: &TravelerConfig,
    loss: &LossSpec,
) -> Result<(M, Vec<EpochLog>)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::DegenerateLabels("no training examples".into()));
    }
    let mut state = OptimizerState::new(AdamConfig {
        step_size: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = seeded(config.seed, 0x7a1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad = model.zeroed();
            for &i in batch {
                total += model.loss_and_grad(&examples[i], loss, &mut grad)?;
            }
            let scale = 1.0 / batch.len() as f64;
            for s in grad.param_slices_mut() {
                for g in s {
                    *g *= scale;
                }
            }
            adam_update(&mut model, &grad, &mut state)?;
        }
        if !model.all_finite() {
            return Err(Error::Numeric(format!("{} parameters diverged", model.kind())));
        }
        trace.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: total / examples.len() as f64,
            wall_ms: started.elapsed().as_millis(),
        });
    }
    Ok((model, trace))
}

/// A trained (or parameter-free) traveler encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum TravelerModel {
    Random { input_dim: usize },
    Average(AverageModel),
    Dan(DanModel),
    Lstm(LstmModel),
    LstmAttention(AttentionModel),
}

impl TravelerModel {
    /// Freshly initialized parameters for `kind`.
    pub fn initialize(kind: ModelKind, input_dim: usize, dims: &TravelerDims, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed, 0x1a17);
        Ok(match kind {
            ModelKind::Random => TravelerModel::Random { input_dim },
            ModelKind::Average => TravelerModel::Average(AverageModel::new(input_dim, &mut rng)),
            ModelKind::Dan => TravelerModel::Dan(DanModel::new(input_dim, dims, &mut rng)?),
            ModelKind::Lstm => TravelerModel::Lstm(LstmModel::new(input_dim, dims.lstm_hidden, &mut rng)),
            ModelKind::LstmAttention => {
                TravelerModel::LstmAttention(AttentionModel::new(input_dim, dims.lstm_hidden, &mut rng))
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            TravelerModel::Random { .. } => ModelKind::Random,
            TravelerModel::Average(_) => ModelKind::Average,
            TravelerModel::Dan(_) => ModelKind::Dan,
            TravelerModel::Lstm(_) => ModelKind::Lstm,
            TravelerModel::LstmAttention(_) => ModelKind::LstmAttention,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TravelerModel::Random { input_dim } => *input_dim,
            TravelerModel::Average(m) => m.input_dim(),
            TravelerModel::Dan(m) => m.input_dim(),
            TravelerModel::Lstm(m) => m.input_dim(),
            TravelerModel::LstmAttention(m) => m.input_dim(),
        }
    }

    /// Width of [`TravelerModel::traveler_embedding`]: the input width for
    /// random and average, the DAN embedding layer for dan, the LSTM hidden
    /// width for the recurrent kinds.
    pub fn embedding_dim(&self) -> usize {
        match self {
            TravelerModel::Random { input_dim } => *input_dim,
            TravelerModel::Average(m) => m.embedding_dim(),
            TravelerModel::Dan(m) => m.embedding_dim(),
            TravelerModel::Lstm(m) => m.embedding_dim(),
            TravelerModel::LstmAttention(m) => m.embedding_dim(),
        }
    }

    /// Booking probability; `None` for the random baseline, which has no head.
    pub fn booking_probability(&self, viewed: &[Vec<f64>]) -> Result<Option<f64>> {
        Ok(match self {
            TravelerModel::Random { .. } => None,
            TravelerModel::Average(m) => Some(m.predict(viewed)?.0),
            TravelerModel::Dan(m) => Some(m.predict(viewed)?.0),
            TravelerModel::Lstm(m) => Some(m.predict(viewed)?.0),
            TravelerModel::LstmAttention(m) => Some(m.predict(viewed)?.0),
        })
    }

    /// The traveler embedding of a prefix. `rng` is only consulted by the
    /// random baseline.
    pub fn traveler_embedding(&self, viewed: &[Vec<f64>], rng: &mut impl Rng) -> Result<Vec<f64>> {
        check_input(viewed, self.input_dim())?;
        match self {
            TravelerModel::Random { .. } => baseline_random(viewed, rng),
            TravelerModel::Average(m) => Ok(m.predict(viewed)?.1),
            TravelerModel::Dan(m) => Ok(m.predict(viewed)?.1),
            TravelerModel::Lstm(m) => Ok(m.predict(viewed)?.1),
            TravelerModel::LstmAttention(m) => Ok(m.predict(viewed)?.1),
        }
    }

    pub fn to_model_file(&self, provenance: BTreeMap<String, String>) -> ModelFile {
        let mut dims = BTreeMap::new();
        dims.insert("input".to_string(), self.input_dim());
        let layers: Vec<LayerRecord> = match self {
            TravelerModel::Random { .. } => Vec::new(),
            TravelerModel::Average(m) => vec![m.head.to_record("head")],
            TravelerModel::Dan(m) => {
                dims.insert("expand".into(), m.project.out_dim());
                dims.insert("hidden".into(), m.hidden.out_dim());
                dims.insert("embedding".into(), m.embed.out_dim());
                vec![
                    m.project.to_record("project"),
                    m.hidden.to_record("hidden"),
                    m.embed.to_record("embedding"),
                    m.head.to_record("head"),
                ]
            }
            TravelerModel::Lstm(m) => {
                dims.insert("lstm_hidden".into(), m.cell.hidden_dim());
                let mut l = cell_records(&m.cell);
                l.push(m.head.to_record("head"));
                l
            }
            TravelerModel::LstmAttention(m) => {
                dims.insert("lstm_hidden".into(), m.cell.hidden_dim());
                let mut l = cell_records(&m.cell);
                l.push(LayerRecord {
                    name: "attention".into(),
                    in_dim: m.score.len(),
                    out_dim: 1,
                    weights: m.score.clone(),
                    bias: Vec::new(),
                    activation: Activation::Linear,
                });
                l.push(m.head.to_record("head"));
                l
            }
        };
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model_kind: self.kind().as_str().to_string(),
            dims,
            layers,
            traveler_embedding_dim: Some(self.embedding_dim()),
            provenance,
        }
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let kind: ModelKind = file.model_kind.parse()?;
        let layer = |name: &str| DenseLayer::from_record(file.layer(name)?);
        let cell = || -> Result<LstmCell> {
            Ok(LstmCell {
                forget: layer("forget")?,
                input: layer("input")?,
                output: layer("output")?,
                candidate: layer("candidate")?,
            })
        };
        let model = match kind {
            ModelKind::Random => TravelerModel::Random {
                input_dim: file.dim("input")?,
            },
            ModelKind::Average => TravelerModel::Average(AverageModel { head: layer("head")? }),
            ModelKind::Dan => TravelerModel::Dan(DanModel {
                project: layer("project")?,
                hidden: layer("hidden")?,
                embed: layer("embedding")?,
                head: layer("head")?,
            }),
            ModelKind::Lstm => TravelerModel::Lstm(LstmModel {
                cell: cell()?,
                head: layer("head")?,
            }),
            ModelKind::LstmAttention => TravelerModel::LstmAttention(AttentionModel {
                cell: cell()?,
                score: file.layer("attention")?.weights.clone(),
                head: layer("head")?,
            }),
        };
        if model.input_dim() != file.dim("input")? {
            return Err(Error::Shape("model layers disagree with declared input dim".into()));
        }
        Ok(model)
    }
}

fn cell_records(cell: &LstmCell) -> Vec<LayerRecord> {
    vec![
        cell.forget.to_record("forget"),
        cell.input.to_record("input"),
        cell.output.to_record("output"),
        cell.candidate.to_record("candidate"),
    ]
}

#[derive(Clone, Debug)]
pub struct TrainedTraveler {
    pub model: TravelerModel,
    pub loss_trace: Vec<EpochLog>,
    pub positive_weight: f64,
}

/// Trains a traveler model of `kind` on booking labels. The random baseline
/// has nothing to train and is rejected.
pub fn train_traveler_model(
    examples: &[TravelerExample],
    kind: ModelKind,
    config: &TravelerConfig,
) -> Result<TrainedTraveler> {
    config.validate()?;
    if !kind.is_trainable() {
        return Err(Error::config("kind", "the random baseline is not trainable"));
    }
    let default_weight = default_positive_weight(examples)?;
    let positive_weight = config.positive_weight.unwrap_or(default_weight);
    let loss = LossSpec::new(positive_weight)?;
    let input_dim = examples[0].viewed[0].len();
    let truncated: Vec<TravelerExample>;
    let examples = if examples.iter().any(|e| e.viewed.len() > config.max_prefix) {
        truncated = examples
            .iter()
            .map(|e| {
                let skip = e.viewed.len().saturating_sub(config.max_prefix);
                TravelerExample {
                    traveler_key: e.traveler_key.clone(),
                    viewed: e.viewed[skip..].to_vec(),
                    label: e.label,
                }
            })
            .collect();
        &truncated[..]
    } else {
        examples
    };

    let init = TravelerModel::initialize(kind, input_dim, &config.dims, config.seed)?;
    let (model, loss_trace) = match init {
        TravelerModel::Average(m) => {
            let (m, t) = fit(m, examples, config, &loss)?;
            (TravelerModel::Average(m), t)
        }
        TravelerModel::Dan(m) => {
            let (m, t) = fit(m, examples, config, &loss)?;
            (TravelerModel::Dan(m), t)
        }
        TravelerModel::Lstm(m) => {
            let (m, t) = fit(m, examples, config, &loss)?;
            (TravelerModel::Lstm(m), t)
        }
        TravelerModel::LstmAttention(m) => {
            let (m, t) = fit(m, examples, config, &loss)?;
            (TravelerModel::LstmAttention(m), t)
        }
        TravelerModel::Random { .. } => unreachable!("rejected above"),
    };
    Ok(TrainedTraveler {
        model,
        loss_trace,
        positive_weight,
    })
}

/// Fraction of examples whose thresholded probability matches the label.
pub fn accuracy(model: &TravelerModel, examples: &[TravelerExample]) -> Result<f64> {
    let mut correct = 0usize;
    for e in examples {
        let p = model
            .booking_probability(&e.viewed)?
            .ok_or_else(|| Error::Invalid("model has no booking head".into()))?;
        if (p >= 0.5) == (e.label == 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Parameters drawn uniformly from `[-scale, scale]`, for gradient checks.
pub fn random_parameters(kind: ModelKind, input_dim: usize, dims: &TravelerDims, scale: f64, seed: u64) -> Result<TravelerModel> {
    let mut model = TravelerModel::initialize(kind, input_dim, dims, seed)?;
    let mut rng = seeded(seed, 0x9a7);
    let mut fill = |slices: Vec<&mut [f64]>| {
        for s in slices {
            for x in s {
                *x = rng.random_range(-scale..=scale);
            }
        }
    };
    match &mut model {
        TravelerModel::Random { .. } => {}
        TravelerModel::Average(m) => fill(m.param_slices_mut()),
        TravelerModel::Dan(m) => fill(m.param_slices_mut()),
        TravelerModel::Lstm(m) => fill(m.param_slices_mut()),
        TravelerModel::LstmAttention(m) => fill(m.param_slices_mut()),
    }
    Ok(model)
}
