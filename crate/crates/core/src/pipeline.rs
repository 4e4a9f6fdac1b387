//! Stage commands behind the `tripvec` binary.
//!
//! Every stage reads its inputs from, and writes its outputs to, one output
//! directory, so the stages chain by file name:
//!
//! | stage              | reads                                             | writes |
//! |--------------------|---------------------------------------------------|--------|
//! | `generate`         | config                                            | `sessions.tsv`, `ground_truth.tsv`, `demand.csv`, `centroids.csv`, `cold_listings.csv` |
//! | `train-embeddings` | `sessions.tsv`                                    | `train_sessions.tsv`, `test_sessions.tsv`, `embeddings.txt`, `embeddings.bin`, `embedding_loss.tsv` |
//! | `coldstart`        | `embeddings.txt`, `demand.csv`, `centroids.csv`, `cold_listings.csv` | `embeddings_coldstart.txt` |
//! | `train-traveler`   | `embeddings.txt`, `train_sessions.tsv`            | `traveler_<kind>.json`, `traveler_<kind>_loss.tsv` |
//! | `evaluate`         | the above plus trained traveler models            | `report_<setting>.json`, `comparison.txt` |
//!
//! No stage rewrites a file it reads. Output directories are never created
//! implicitly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coldstart::{
    centroid_map, demand_belief_from_location, destination_embeddings, extrapolate_cold, read_csv,
    synthetic_geography, write_csv, CentroidRecord, ColdListingRecord, DemandRecord, DestinationDemand, GeoPoint,
    DEFAULT_NEAREST_DESTINATIONS,
};
use crate::corpus::{
    build_vocabulary, generate_synthetic, load_sessions, save_ground_truth, save_sessions, split_by_user,
    SyntheticConfig, DEFAULT_MIN_COUNT,
};
use crate::error::{Error, Result};
use crate::eval::{compare_settings, downstream_eval, feature_rows, format_comparison, DownstreamConfig, Encoder, EvalReport, FeatureSet};
use crate::neural::{grad_check, LossSpec, ModelFile, Parameters};
use crate::rng::seeded;
use crate::skipgram::{negative_sample, sgns_loss_and_grad, train_embeddings, EmbeddingTable, KeyedVectors, SkipgramConfig};
use crate::traveler::{
    examples_from_prefixes, format_loss_trace, random_parameters, session_prefixes, train_traveler_model, ModelKind,
    SequenceModel, TravelerConfig, TravelerDims, TravelerExample, TravelerModel,
};

pub const SESSIONS_FILE: &str = "sessions.tsv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.tsv";
pub const DEMAND_FILE: &str = "demand.csv";
pub const CENTROIDS_FILE: &str = "centroids.csv";
pub const COLD_LISTINGS_FILE: &str = "cold_listings.csv";
pub const TRAIN_SESSIONS_FILE: &str = "train_sessions.tsv";
pub const TEST_SESSIONS_FILE: &str = "test_sessions.tsv";
pub const EMBEDDINGS_TEXT_FILE: &str = "embeddings.txt";
pub const EMBEDDINGS_BINARY_FILE: &str = "embeddings.bin";
pub const EMBEDDING_LOSS_FILE: &str = "embedding_loss.tsv";
pub const COLDSTART_FILE: &str = "embeddings_coldstart.txt";
pub const COMPARISON_FILE: &str = "comparison.txt";

pub fn traveler_model_file(kind: ModelKind) -> String {
    format!("traveler_{kind}.json")
}

pub fn traveler_loss_file(kind: ModelKind) -> String {
    format!("traveler_{kind}_loss.tsv")
}

pub fn report_file(setting: FeatureSet) -> String {
    format!("report_{}.json", setting.to_string().replace('+', "_"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Session log to train from instead of `<out_dir>/sessions.tsv`.
    pub sessions: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("out"),
            sessions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub generator: SyntheticConfig,
    pub min_count: u64,
    pub train_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            generator: SyntheticConfig::default(),
            min_count: DEFAULT_MIN_COUNT,
            train_fraction: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColdstartSection {
    /// Cold listings emitted by `generate`.
    pub cold_listings: usize,
    pub nearest_destinations: usize,
}

impl Default for ColdstartSection {
    fn default() -> Self {
        ColdstartSection {
            cold_listings: 20,
            nearest_destinations: DEFAULT_NEAREST_DESTINATIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub settings: Vec<String>,
    pub classifier: DownstreamConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            settings: ["handcrafted", "random", "average", "dan", "lstm", "lstm_attention"]
                .map(String::from)
                .to_vec(),
            classifier: DownstreamConfig::default(),
        }
    }
}

/// The whole pipeline's configuration. The global `seed` replaces the
/// `seed` field of every section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusSection,
    pub skipgram: SkipgramConfig,
    pub coldstart: ColdstartSection,
    pub traveler: TravelerConfig,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            paths: PathsConfig::default(),
            corpus: CorpusSection::default(),
            skipgram: SkipgramConfig::default(),
            coldstart: ColdstartSection::default(),
            traveler: TravelerConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses JSON; malformed text and unknown keys are configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Copies the global seed into every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.corpus.generator.seed = c.seed;
        c.skipgram.seed = c.seed;
        c.traveler.seed = c.seed;
        c.eval.classifier.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.generator.validate()?;
        if !(self.corpus.train_fraction > 0.0 && self.corpus.train_fraction < 1.0) {
            return Err(Error::config("corpus.train_fraction", "must lie in (0, 1)"));
        }
        self.skipgram.validate()?;
        if self.coldstart.nearest_destinations == 0 {
            return Err(Error::config("coldstart.nearest_destinations", "must be at least 1"));
        }
        self.traveler.validate()?;
        self.eval.classifier.validate()?;
        self.settings()?;
        Ok(())
    }

    pub fn settings(&self) -> Result<Vec<FeatureSet>> {
        parse_settings(&self.eval.settings)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    fn sessions_path(&self) -> PathBuf {
        self.paths
            .sessions
            .clone()
            .unwrap_or_else(|| self.out(SESSIONS_FILE))
    }
}

/// Parses setting names, rejecting duplicates.
pub fn parse_settings<S: AsRef<str>>(names: &[S]) -> Result<Vec<FeatureSet>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for n in names {
        let s: FeatureSet = n.as_ref().parse()?;
        if !seen.insert(s) {
            return Err(Error::config("settings", format!("duplicate setting {s}")));
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::config("settings", "at least one setting required"));
    }
    Ok(out)
}

/// FNV-1a digest of a file, used to tie artifacts to their inputs.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Synthetic session log, its ground truth and a matching geography.
pub fn cmd_generate(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let config = config.resolved();
    config.validate()?;
    let (corpus, truth) = generate_synthetic(&config.corpus.generator)?;
    let geo = synthetic_geography(
        &truth.cluster_of_listing,
        truth.cluster_count,
        config.coldstart.cold_listings,
        config.seed,
    )?;
    let files = [
        SESSIONS_FILE,
        GROUND_TRUTH_FILE,
        DEMAND_FILE,
        CENTROIDS_FILE,
        COLD_LISTINGS_FILE,
    ]
    .map(|f| config.out(f));
    save_sessions(&corpus, &files[0])?;
    save_ground_truth(&truth, &files[1])?;
    write_csv(&files[2], &geo.demand)?;
    write_csv(&files[3], &geo.centroids)?;
    write_csv(&files[4], &geo.cold_listings)?;
    Ok(files.to_vec())
}

/// User-disjoint split, then listing embeddings from the train side.
pub fn cmd_train_embeddings(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let config = config.resolved();
    config.validate()?;
    let corpus = load_sessions(config.sessions_path())?;
    let (train, test) = split_by_user(&corpus, config.corpus.train_fraction, config.seed)?;
    let vocabulary = build_vocabulary(&train, config.corpus.min_count)?;
    let trained = train_embeddings(&train, &vocabulary, &config.skipgram)?;

    let files = [
        TRAIN_SESSIONS_FILE,
        TEST_SESSIONS_FILE,
        EMBEDDINGS_TEXT_FILE,
        EMBEDDINGS_BINARY_FILE,
        EMBEDDING_LOSS_FILE,
    ]
    .map(|f| config.out(f));
    save_sessions(&train, &files[0])?;
    save_sessions(&test, &files[1])?;
    trained.table.keyed(&vocabulary)?.save_text(&files[2])?;
    trained.table.save_binary(&files[3])?;
    let loss: String = trained
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{}\t{l}\n", e + 1))
        .collect();
    write_text(&files[4], &loss)?;
    Ok(files.to_vec())
}

/// Extrapolated rows for cold listings, appended to a copy of the table.
pub fn cmd_coldstart(config: &PipelineConfig) -> Result<(PathBuf, usize)> {
    let config = config.resolved();
    config.validate()?;
    let mut vectors = KeyedVectors::load_text(config.out(EMBEDDINGS_TEXT_FILE))?;
    let demand: Vec<DemandRecord> = read_csv(config.out(DEMAND_FILE))?;
    let centroids: Vec<CentroidRecord> = read_csv(config.out(CENTROIDS_FILE))?;
    let cold: Vec<ColdListingRecord> = read_csv(config.out(COLD_LISTINGS_FILE))?;

    let rows = coldstart_rows(&vectors, &demand, &centroids, &cold, config.coldstart.nearest_destinations)?;
    let appended = rows.len();
    if appended > 0 {
        vectors.append_cold(rows)?;
    }
    let out = config.out(COLDSTART_FILE);
    vectors.save_text(&out)?;
    Ok((out, appended))
}

/// Cold-listing vectors: location → destination belief → weighted mean of
/// destination vectors. Destinations without any embedded listing are not
/// candidates.
pub fn coldstart_rows(
    vectors: &KeyedVectors,
    demand: &[DemandRecord],
    centroids: &[CentroidRecord],
    cold: &[ColdListingRecord],
    nearest: usize,
) -> Result<Vec<(String, Vec<f64>)>> {
    if cold.is_empty() {
        return Ok(Vec::new());
    }
    let demand = DestinationDemand::from_records(demand, vectors, true)?;
    let dest = destination_embeddings(vectors, &demand)?;
    let mut centroids = centroid_map(centroids)?;
    centroids.retain(|id, _| dest.vectors.contains_key(id));
    cold.iter()
        .map(|c| {
            if vectors.index(&c.listing_key).is_some() {
                return Err(Error::Invalid(format!("cold listing {} already has an embedding", c.listing_key)));
            }
            let point = GeoPoint::new(c.latitude, c.longitude)?;
            let belief = demand_belief_from_location(&point, &centroids, nearest)?;
            Ok((c.listing_key.clone(), extrapolate_cold(&belief, &dest)?))
        })
        .collect()
}

fn model_provenance(config: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let mut p = BTreeMap::new();
    p.insert("split".into(), "train".into());
    p.insert("train_sessions".into(), file_digest(config.out(TRAIN_SESSIONS_FILE))?);
    p.insert("embeddings".into(), file_digest(config.out(EMBEDDINGS_TEXT_FILE))?);
    p.insert("seed".into(), config.seed.to_string());
    Ok(p)
}

fn train_examples(config: &PipelineConfig, vectors: &KeyedVectors) -> Result<Vec<TravelerExample>> {
    let train = load_sessions(config.out(TRAIN_SESSIONS_FILE))?;
    let prefixes = session_prefixes(&train, vectors);
    examples_from_prefixes(&prefixes, vectors, config.traveler.max_prefix)
}

/// Trains one traveler model on the train side.
pub fn cmd_train_traveler(config: &PipelineConfig, kind: ModelKind) -> Result<Vec<PathBuf>> {
    let config = config.resolved();
    config.validate()?;
    let vectors = KeyedVectors::load_text(config.out(EMBEDDINGS_TEXT_FILE))?;
    let examples = train_examples(&config, &vectors)?;
    let trained = train_traveler_model(&examples, kind, &config.traveler)?;
    let mut provenance = model_provenance(&config)?;
    provenance.insert("positive_weight".into(), trained.positive_weight.to_string());
    let model_path = config.out(&traveler_model_file(kind));
    let loss_path = config.out(&traveler_loss_file(kind));
    trained.model.to_model_file(provenance).save(&model_path)?;
    write_text(&loss_path, &format_loss_trace(&trained.loss_trace))?;
    Ok(vec![model_path, loss_path])
}

/// Loads the traveler model a setting needs and checks it was trained on
/// the current train side and embeddings.
fn load_encoder(config: &PipelineConfig, kind: ModelKind, input_dim: usize) -> Result<TravelerModel> {
    if kind == ModelKind::Random {
        return Ok(TravelerModel::Random { input_dim });
    }
    let path = config.out(&traveler_model_file(kind));
    let file = ModelFile::load(&path)?;
    let expected = model_provenance(config)?;
    for key in ["split", "train_sessions", "embeddings"] {
        if file.provenance.get(key) != expected.get(key) {
            return Err(Error::Invalid(format!(
                "{}: provenance {key} does not match the current train side; retrain with train-traveler",
                path.display()
            )));
        }
    }
    TravelerModel::from_model_file(&file)
}

/// Downstream reports for each setting plus the ranked comparison table.
/// Settings are evaluated on parallel threads; results are returned in the
/// order given.
pub fn cmd_evaluate(config: &PipelineConfig, settings: &[FeatureSet]) -> Result<Vec<EvalReport>> {
    let config = config.resolved();
    config.validate()?;
    let vectors = KeyedVectors::load_text(config.out(EMBEDDINGS_TEXT_FILE))?;
    let train = load_sessions(config.out(TRAIN_SESSIONS_FILE))?;
    let test = load_sessions(config.out(TEST_SESSIONS_FILE))?;
    let train_travelers: BTreeSet<&str> = train.travelers().into_iter().collect();
    if let Some(t) = test.travelers().into_iter().find(|t| train_travelers.contains(t)) {
        return Err(Error::Invalid(format!("traveler {t} appears on both sides of the split")));
    }
    let train_prefixes = session_prefixes(&train, &vectors);
    let test_prefixes = session_prefixes(&test, &vectors);

    let mut models = BTreeMap::new();
    for s in settings {
        if let Some(kind) = s.kind() {
            if let std::collections::btree_map::Entry::Vacant(e) = models.entry(kind) {
                e.insert(load_encoder(&config, kind, vectors.dim())?);
            }
        }
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("train_sessions".to_string(), file_digest(config.out(TRAIN_SESSIONS_FILE))?);
    provenance.insert("test_sessions".to_string(), file_digest(config.out(TEST_SESSIONS_FILE))?);
    provenance.insert("embeddings".to_string(), file_digest(config.out(EMBEDDINGS_TEXT_FILE))?);

    let run = |setting: FeatureSet| -> Result<EvalReport> {
        let encoder = setting.kind().map(|k| Encoder {
            model: &models[&k],
            vectors: &vectors,
            max_prefix: config.traveler.max_prefix,
        });
        let seed = config.eval.classifier.seed;
        let train_rows = feature_rows(&train_prefixes, setting, encoder, seed)?;
        let test_rows = feature_rows(&test_prefixes, setting, encoder, seed.wrapping_add(1))?;
        let mut report = downstream_eval(&train_rows, &test_rows, setting, &config.eval.classifier)?;
        report.provenance = provenance.clone();
        if let Some(k) = setting.kind() {
            report.provenance.insert("model_kind".into(), k.to_string());
        }
        Ok(report)
    };
    let reports: Vec<EvalReport> = std::thread::scope(|scope| {
        let handles: Vec<_> = settings.iter().map(|&s| scope.spawn(move || run(s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    for (s, r) in settings.iter().zip(&reports) {
        r.save(config.out(&report_file(*s)))?;
    }
    let table = if reports.len() >= 2 {
        format_comparison(&compare_settings(&reports)?)
    } else {
        format_comparison(&reports)
    };
    write_text(&config.out(COMPARISON_FILE), &table)?;
    Ok(reports)
}

/// All stages in order, training every traveler kind the settings need.
pub fn cmd_pipeline(config: &PipelineConfig) -> Result<Vec<EvalReport>> {
    let settings = config.settings()?;
    cmd_generate(config)?;
    cmd_train_embeddings(config)?;
    cmd_coldstart(config)?;
    let kinds: BTreeSet<ModelKind> = settings
        .iter()
        .filter_map(|s| s.kind())
        .filter(|k| k.is_trainable())
        .collect();
    for kind in kinds {
        cmd_train_traveler(config, kind)?;
    }
    cmd_evaluate(config, &settings)
}

// ---------------------------------------------------------------------------
// Gradient check

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Worst relative error over all trials for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckLine {
    /// A traveler kind name, or `sgns`.
    pub name: String,
    pub is_traveler_kind: bool,
    pub max_relative_error: f64,
    pub trials: usize,
}

impl GradCheckLine {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }

    pub fn render(&self) -> String {
        format!(
            "{} {} max_rel_err {:.3e} over {} trials {}",
            if self.is_traveler_kind { "kind" } else { "step" },
            self.name,
            self.max_relative_error,
            self.trials,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn corrupt_in_place<M: Parameters>(grad: &mut M) {
    for s in grad.param_slices_mut() {
        for g in s {
            *g *= 1.01;
        }
    }
}

fn check_model<M: SequenceModel>(model: &M, example: &TravelerExample, loss: &LossSpec, corrupt: bool) -> Result<f64> {
    let report = grad_check(model, GRADCHECK_STEP, |m: &M| {
        let mut g = m.zeroed();
        let l = m.loss_and_grad(example, loss, &mut g)?;
        if corrupt {
            corrupt_in_place(&mut g);
        }
        Ok((l, g))
    })?;
    Ok(report.max_relative_error)
}

/// Finite-difference check of every trainable traveler kind and the SGNS
/// step over `trials` random parameterizations each. `corrupt` scales the
/// analytic gradients by 1.01 as a negative control.
pub fn gradient_check_suite(trials: usize, corrupt: bool, seed: u64) -> Result<Vec<GradCheckLine>> {
    const INPUT_DIM: usize = 4;
    let dims = TravelerDims {
        expand: 6,
        hidden: 4,
        embedding: 3,
        lstm_hidden: 3,
    };
    let mut lines = Vec::new();
    for kind in ModelKind::TRAINABLE {
        let mut rng = seeded(seed, 0x6c00 + kind as u64);
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let len = 1 + trial % 5;
            let viewed: Vec<Vec<f64>> = (0..len)
                .map(|_| (0..INPUT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let example = TravelerExample::new("probe", viewed, rng.random_range(0..2u8))?;
            let loss = LossSpec::new(rng.random_range(1.0..3.0))?;
            let model = random_parameters(kind, INPUT_DIM, &dims, 0.5, seed.wrapping_mul(1000).wrapping_add(trial as u64))?;
            let err = match &model {
                TravelerModel::Average(m) => check_model(m, &example, &loss, corrupt)?,
                TravelerModel::Dan(m) => check_model(m, &example, &loss, corrupt)?,
                TravelerModel::Lstm(m) => check_model(m, &example, &loss, corrupt)?,
                TravelerModel::LstmAttention(m) => check_model(m, &example, &loss, corrupt)?,
                TravelerModel::Random { .. } => unreachable!("not trainable"),
            };
            worst = worst.max(err);
        }
        lines.push(GradCheckLine {
            name: kind.to_string(),
            is_traveler_kind: true,
            max_relative_error: worst,
            trials,
        });
    }

    const VOCAB: usize = 12;
    const DIM: usize = 6;
    let mut rng = seeded(seed, 0x6c99);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let input = (0..VOCAB * DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
        let output = (0..VOCAB * DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
        let table = EmbeddingTable::from_parts(input, output, VOCAB, DIM)?;
        let center = rng.random_range(0..VOCAB);
        let context = rng.random_range(0..VOCAB);
        let negatives = negative_sample(VOCAB, 5, context, &mut rng)?;
        let report = grad_check(&table, GRADCHECK_STEP, |t: &EmbeddingTable| {
            let (l, mut g) = sgns_loss_and_grad(center, context, &negatives, t)?;
            if corrupt {
                corrupt_in_place(&mut g);
            }
            Ok((l, g))
        })?;
        worst = worst.max(report.max_relative_error);
    }
    lines.push(GradCheckLine {
        name: "sgns".into(),
        is_traveler_kind: false,
        max_relative_error: worst,
        trials,
    });
    Ok(lines)
}
