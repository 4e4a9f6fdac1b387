//! Listing embeddings trained with skip-gram and negative sampling.
//!
//! Each in-vocabulary view in a session is a center; every other view within
//! `window` positions is a positive context. A positive pair is scored with
//! `sigmoid(out[ctx] . in[center])` and `k` randomly drawn listings serve as
//! negatives scored with `sigmoid(-out[neg] . in[center])`. Training minimizes
//! the summed negative log-likelihood with plain SGD and a linearly decaying
//! step size.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{SessionCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::neural::Parameters;
use crate::rng::{seeded, Rng as SeededRng};

/// Logits are clamped to this magnitude before exponentiation.
pub const LOGIT_CLAMP: f64 = 30.0;
/// Negative draws that collide with the positive context are retried this
/// many times before the collision is accepted.
pub const NEGATIVE_REDRAWS: usize = 16;

const BINARY_MAGIC: &[u8; 4] = b"S2RE";
const BINARY_VERSION: u8 = 1;

/// Input (`in`) and output (`out`) vectors for every vocabulary entry, stored
/// row-major. The input vectors are the published listing embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    input: Vec<f64>,
    output: Vec<f64>,
    vocab_size: usize,
    dim: usize,
}

impl EmbeddingTable {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EmbeddingTable {
            input: vec![0.0; vocab_size * dim],
            output: vec![0.0; vocab_size * dim],
            vocab_size,
            dim,
        }
    }

    pub fn from_parts(input: Vec<f64>, output: Vec<f64>, vocab_size: usize, dim: usize) -> Result<Self> {
        if input.len() != vocab_size * dim || output.len() != vocab_size * dim {
            return Err(Error::Shape(format!(
                "expected two {vocab_size}x{dim} matrices, got {} and {} entries",
                input.len(),
                output.len()
            )));
        }
        if input.iter().chain(&output).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("embedding table contains non-finite entries".into()));
        }
        Ok(EmbeddingTable {
            input,
            output,
            vocab_size,
            dim,
        })
    }

    /// Input vectors uniform in `[-0.5/d, 0.5/d]`, output vectors zero.
    pub fn initialize(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 0.5 / dim as f64;
        let input = (0..vocab_size * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        EmbeddingTable {
            input,
            output: vec![0.0; vocab_size * dim],
            vocab_size,
            dim,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.input[i * self.dim..(i + 1) * self.dim]
    }

    pub fn output_row(&self, i: usize) -> &[f64] {
        &self.output[i * self.dim..(i + 1) * self.dim]
    }

    pub fn input_row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.input[i * self.dim..(i + 1) * self.dim]
    }

    pub fn output_row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.output[i * self.dim..(i + 1) * self.dim]
    }

    pub fn input_vectors(&self) -> &[f64] {
        &self.input
    }

    pub fn output_vectors(&self) -> &[f64] {
        &self.output
    }

    pub fn is_finite(&self) -> bool {
        self.input.iter().chain(&self.output).all(|x| x.is_finite())
    }

    /// Input vectors keyed by the vocabulary.
    pub fn keyed(&self, vocabulary: &Vocabulary) -> Result<KeyedVectors> {
        if vocabulary.len() != self.vocab_size {
            return Err(Error::Shape(format!(
                "vocabulary has {} entries, table has {}",
                vocabulary.len(),
                self.vocab_size
            )));
        }
        KeyedVectors::new(vocabulary.keys().to_vec(), self.dim, self.input.clone())
    }

    /// Binary sidecar holding both tables for exact resume.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&[BINARY_VERSION])?;
        out.write_all(&(self.vocab_size as u64).to_le_bytes())?;
        out.write_all(&(self.dim as u64).to_le_bytes())?;
        for x in self.input.iter().chain(&self.output) {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut reader: R) -> Result<Self> {
        let bad = |m: &str| Error::Invalid(format!("binary embedding table: {m}"));
        let mut magic = [0u8; 5];
        reader
            .read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic[..4] != BINARY_MAGIC {
            return Err(bad("bad magic"));
        }
        if magic[4] != BINARY_VERSION {
            return Err(bad(&format!("unsupported version {}", magic[4])));
        }
        let mut word = [0u8; 8];
        reader.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let vocab_size = u64::from_le_bytes(word) as usize;
        reader.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let dim = u64::from_le_bytes(word) as usize;
        let n = vocab_size
            .checked_mul(dim)
            .ok_or_else(|| bad("dimensions overflow"))?;
        let mut values = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            reader.read_exact(&mut word).map_err(|_| bad("truncated body"))?;
            values.push(f64::from_le_bytes(word));
        }
        let output = values.split_off(n);
        EmbeddingTable::from_parts(values, output, vocab_size, dim)
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(BufReader::new(file))
    }
}

/// Published listing vectors with their keys, as stored in the text format.
///
/// Rows from `cold_start_begin` onward were extrapolated rather than trained
/// and are written after a `#coldstart` marker line.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyedVectors {
    keys: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f64>,
    cold_start_begin: Option<usize>,
}

impl KeyedVectors {
    pub fn new(keys: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != keys.len() * dim {
            return Err(Error::Shape(format!(
                "{} keys x {dim} dims needs {} values, got {}",
                keys.len(),
                keys.len() * dim,
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate listing key {k:?}")));
            }
        }
        Ok(KeyedVectors {
            keys,
            index,
            dim,
            data,
            cold_start_begin: None,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn index(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.index(key).map(|i| self.row(i))
    }

    pub fn cold_start_begin(&self) -> Option<usize> {
        self.cold_start_begin
    }

    /// Appends extrapolated rows after the trained ones.
    pub fn append_cold(&mut self, rows: Vec<(String, Vec<f64>)>) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        if self.cold_start_begin.is_none() {
            self.cold_start_begin = Some(self.keys.len());
        }
        for (key, v) in rows {
            if v.len() != self.dim {
                return Err(Error::Shape(format!(
                    "cold row {key:?} has {} dims, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            if self.index.contains_key(&key) {
                return Err(Error::Invalid(format!("duplicate listing key {key:?}")));
            }
            self.index.insert(key.clone(), self.keys.len());
            self.keys.push(key);
            self.data.extend_from_slice(&v);
        }
        Ok(())
    }

    /// Text format: header `V d`, then `key v_1 ... v_d` per row.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.keys.len(), self.dim)?;
        for (i, key) in self.keys.iter().enumerate() {
            if Some(i) == self.cold_start_begin {
                writeln!(out, "#coldstart")?;
            }
            out.write_all(key.as_bytes())?;
            for x in self.row(i) {
                write!(out, " {x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_text<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        let (rows, dim) = loop {
            let (n, line) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
            let line = line.map_err(|e| parse_err(n + 1, e.to_string()))?;
            if line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let v: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(n + 1, "header must be `V d`".into()))?;
            let d: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(n + 1, "header must be `V d`".into()))?;
            break (v, d);
        };
        let mut keys = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * dim);
        let mut cold_start_begin = None;
        for (n, line) in lines {
            let line = line.map_err(|e| parse_err(n + 1, e.to_string()))?;
            if line.starts_with("#coldstart") {
                cold_start_begin = Some(keys.len());
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let key = parts.next().unwrap_or_default().to_string();
            let before = data.len();
            for p in parts {
                let x: f64 = p
                    .parse()
                    .map_err(|_| parse_err(n + 1, format!("invalid value {p:?}")))?;
                data.push(x);
            }
            if data.len() - before != dim {
                return Err(parse_err(
                    n + 1,
                    format!("expected {dim} values, found {}", data.len() - before),
                ));
            }
            keys.push(key);
        }
        if keys.len() != rows {
            return Err(parse_err(0, format!("header declares {rows} rows, found {}", keys.len())));
        }
        let mut kv = KeyedVectors::new(keys, dim, data)?;
        kv.cold_start_begin = cold_start_begin.filter(|&b| b < kv.len());
        Ok(kv)
    }

    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_text(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_text(file)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeDistribution {
    /// Every listing equally likely.
    Uniform,
    /// Proportional to view count raised to 0.75.
    SmoothedUnigram,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipgramConfig {
    pub window: usize,
    pub negatives: usize,
    pub dim: usize,
    pub epochs: usize,
    pub initial_learning_rate: f64,
    pub final_learning_rate: f64,
    pub subsample_threshold: f64,
    pub negative_distribution: NegativeDistribution,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig {
            window: 3,
            negatives: 5,
            dim: 32,
            epochs: 5,
            initial_learning_rate: 0.025,
            final_learning_rate: 0.0001,
            subsample_threshold: crate::corpus::DEFAULT_SUBSAMPLE_THRESHOLD,
            negative_distribution: NegativeDistribution::Uniform,
            seed: 1,
        }
    }
}

impl SkipgramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if self.negatives < 1 {
            return Err(Error::config("negatives", "must be at least 1"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.final_learning_rate > 0.0 && self.final_learning_rate.is_finite()) {
            return Err(Error::config("final_learning_rate", "must be positive"));
        }
        if !(self.initial_learning_rate >= self.final_learning_rate
            && self.initial_learning_rate.is_finite())
        {
            return Err(Error::config(
                "initial_learning_rate",
                "must be at least final_learning_rate",
            ));
        }
        if !(self.subsample_threshold > 0.0 && self.subsample_threshold.is_finite()) {
            return Err(Error::config("subsample_threshold", "must be positive"));
        }
        Ok(())
    }
}

/// Every `(center, context)` pair with `0 < |offset| <= window`, ordered by
/// center position then offset.
pub fn generate_training_pairs(indices: &[usize], window: usize) -> Vec<(usize, usize)> {
    let n = indices.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n.saturating_sub(1));
        for j in lo..=hi {
            if j != i {
                pairs.push((indices[i], indices[j]));
            }
        }
    }
    pairs
}

/// Draws negative listings for a positive context.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    vocab_size: usize,
    weighted: Option<WeightedIndex<f64>>,
}

impl NegativeSampler {
    pub fn uniform(vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Invalid(
                "cannot negative-sample a single-listing vocabulary".into(),
            ));
        }
        Ok(NegativeSampler {
            vocab_size,
            weighted: None,
        })
    }

    pub fn for_vocabulary(vocabulary: &Vocabulary, distribution: NegativeDistribution) -> Result<Self> {
        let mut sampler = Self::uniform(vocabulary.len())?;
        if distribution == NegativeDistribution::SmoothedUnigram {
            let weights = vocabulary.counts().iter().map(|&c| (c as f64).powf(0.75));
            sampler.weighted =
                Some(WeightedIndex::new(weights).map_err(|e| Error::Invalid(e.to_string()))?);
        }
        Ok(sampler)
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        match &self.weighted {
            Some(w) => w.sample(rng),
            None => rng.random_range(0..self.vocab_size),
        }
    }

    /// `k` independent draws, each redrawn up to [`NEGATIVE_REDRAWS`] times
    /// while it equals `positive`.
    pub fn sample(&self, k: usize, positive: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..k)
            .map(|_| {
                let mut x = self.draw(rng);
                for _ in 0..NEGATIVE_REDRAWS {
                    if x != positive {
                        break;
                    }
                    x = self.draw(rng);
                }
                x
            })
            .collect()
    }
}

/// Uniform negative sample over a vocabulary of `vocab_size` listings.
pub fn negative_sample(vocab_size: usize, k: usize, positive: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::config("negatives", "must be at least 1"));
    }
    Ok(NegativeSampler::uniform(vocab_size)?.sample(k, positive, rng))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `-ln sigmoid(x)` for a clamped logit.
fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).exp().ln_1p()
}

/// Gradient of the negative-sampling loss for one positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SgnsGradient {
    pub loss: f64,
    /// Gradient with respect to the center's input vector.
    pub center: Vec<f64>,
    /// Gradient with respect to output vectors, one entry per distinct index.
    pub outputs: Vec<(usize, Vec<f64>)>,
}

/// Loss `-ln s(out[ctx].in[c]) - sum ln s(-out[neg].in[c])` and its exact
/// gradient. Repeated negatives contribute once per occurrence.
pub fn sgns_gradient(
    center: usize,
    context: usize,
    negatives: &[usize],
    table: &EmbeddingTable,
) -> Result<SgnsGradient> {
    let v = table.vocab_size();
    if center >= v || context >= v || negatives.iter().any(|&n| n >= v) {
        return Err(Error::Shape(format!("index out of range for vocabulary of {v}")));
    }
    let d = table.dim();
    let c_vec = table.input_row(center);
    let mut g_center = vec![0.0; d];
    let mut outputs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(negatives.len() + 1);
    let mut loss = 0.0;

    let targets = std::iter::once((context, true)).chain(negatives.iter().map(|&n| (n, false)));
    for (idx, positive) in targets {
        let o_vec = table.output_row(idx);
        let raw = dot(o_vec, c_vec);
        if !raw.is_finite() {
            return Err(Error::Numeric(format!("non-finite logit for pair ({center}, {idx})")));
        }
        let s = raw.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        // d loss / d s
        let g = if positive {
            loss += neg_log_sigmoid(s);
            sigmoid(s) - 1.0
        } else {
            loss += neg_log_sigmoid(-s);
            sigmoid(s)
        };
        for (gc, o) in g_center.iter_mut().zip(o_vec) {
            *gc += g * o;
        }
        let slot = match outputs.iter().position(|(i, _)| *i == idx) {
            Some(p) => p,
            None => {
                outputs.push((idx, vec![0.0; d]));
                outputs.len() - 1
            }
        };
        for (go, c) in outputs[slot].1.iter_mut().zip(c_vec) {
            *go += g * c;
        }
    }
    Ok(SgnsGradient {
        loss,
        center: g_center,
        outputs,
    })
}

/// [`sgns_gradient`] laid out as a full table-shaped gradient.
pub fn sgns_loss_and_grad(
    center: usize,
    context: usize,
    negatives: &[usize],
    table: &EmbeddingTable,
) -> Result<(f64, EmbeddingTable)> {
    let g = sgns_gradient(center, context, negatives, table)?;
    let mut grad = EmbeddingTable::zeros(table.vocab_size(), table.dim());
    grad.input_row_mut(center).copy_from_slice(&g.center);
    for (idx, row) in &g.outputs {
        grad.output_row_mut(*idx).copy_from_slice(row);
    }
    Ok((g.loss, grad))
}

impl Parameters for EmbeddingTable {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![&self.input, &self.output]
    }
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.input, &mut self.output]
    }
}

/// One SGD step on a positive pair and its negatives. Returns the loss before
/// the update.
pub fn sgns_step(
    center: usize,
    context: usize,
    negatives: &[usize],
    table: &mut EmbeddingTable,
    learning_rate: f64,
) -> Result<f64> {
    if !(learning_rate > 0.0) {
        return Err(Error::config("learning_rate", "must be positive"));
    }
    let grad = sgns_gradient(center, context, negatives, table)?;
    for (w, g) in table.input_row_mut(center).iter_mut().zip(&grad.center) {
        *w -= learning_rate * g;
    }
    for (idx, g_out) in &grad.outputs {
        for (w, g) in table.output_row_mut(*idx).iter_mut().zip(g_out) {
            *w -= learning_rate * g;
        }
    }
    Ok(grad.loss)
}

/// Trained table plus the mean per-pair loss of each epoch.
#[derive(Clone, Debug)]
pub struct TrainedEmbeddings {
    pub table: EmbeddingTable,
    pub epoch_losses: Vec<f64>,
}

pub fn train_embeddings(
    corpus: &SessionCorpus,
    vocabulary: &Vocabulary,
    config: &SkipgramConfig,
) -> Result<TrainedEmbeddings> {
    config.validate()?;
    let mut rng = seeded(config.seed, 0x1417);
    let table = EmbeddingTable::initialize(vocabulary.len(), config.dim, &mut rng);
    train_embeddings_from(table, corpus, vocabulary, config)
}

/// Continues training from an existing table, e.g. one restored from the
/// binary sidecar.
pub fn train_embeddings_from(
    mut table: EmbeddingTable,
    corpus: &SessionCorpus,
    vocabulary: &Vocabulary,
    config: &SkipgramConfig,
) -> Result<TrainedEmbeddings> {
    config.validate()?;
    if table.vocab_size() != vocabulary.len() || table.dim() != config.dim {
        return Err(Error::Shape(format!(
            "table is {}x{}, expected {}x{}",
            table.vocab_size(),
            table.dim(),
            vocabulary.len(),
            config.dim
        )));
    }
    let sampler = NegativeSampler::for_vocabulary(vocabulary, config.negative_distribution)?;
    let keep = vocabulary.keep_probabilities(config.subsample_threshold)?;
    let encoded: Vec<Vec<usize>> = corpus
        .sessions()
        .iter()
        .map(|s| vocabulary.encode_views(s))
        .filter(|v| v.len() >= 2)
        .collect();

    let lr_span = config.initial_learning_rate - config.final_learning_rate;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng: SeededRng = seeded(config.seed, 0x10_0000 + epoch as u64);
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut rng);

        let mut pairs = Vec::new();
        let mut kept = Vec::new();
        for &s in &order {
            kept.clear();
            for &idx in &encoded[s] {
                if keep[idx] >= 1.0 || rng.random::<f64>() < keep[idx] {
                    kept.push(idx);
                }
            }
            pairs.extend(generate_training_pairs(&kept, config.window));
        }

        let n = pairs.len();
        let mut total = 0.0;
        for (p, &(center, context)) in pairs.iter().enumerate() {
            let progress = (epoch as f64 + p as f64 / n as f64) / config.epochs as f64;
            let lr = config.initial_learning_rate - lr_span * progress;
            let negatives = sampler.sample(config.negatives, context, &mut rng);
            total += sgns_step(center, context, &negatives, &mut table, lr)?;
        }
        epoch_losses.push(if n == 0 { 0.0 } else { total / n as f64 });
    }
    if !table.is_finite() {
        return Err(Error::Numeric("training produced non-finite embeddings".into()));
    }
    Ok(TrainedEmbeddings {
        table,
        epoch_losses,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// The `top_k` rows most cosine-similar to `index` (itself excluded), ties by
/// row index.
pub fn nearest_neighbors(table: &EmbeddingTable, index: usize, top_k: usize) -> Result<Vec<(usize, f64)>> {
    let v = table.vocab_size();
    if index >= v {
        return Err(Error::Invalid(format!("listing index {index} out of range (V = {v})")));
    }
    if top_k >= v {
        return Err(Error::config("top_k", format!("must be less than V = {v}")));
    }
    let query = table.input_row(index);
    let mut scored: Vec<(usize, f64)> = (0..v)
        .filter(|&i| i != index)
        .map(|i| (i, cosine(query, table.input_row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    Ok(scored)
}
