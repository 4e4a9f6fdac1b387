//! Clickstream sessions: data model, synthetic generation, the tab-separated
//! session log, vocabulary construction, frequency subsampling and the
//! traveler-disjoint train/test split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Geometric};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Default relative-frequency threshold for subsampling.
pub const DEFAULT_SUBSAMPLE_THRESHOLD: f64 = 1e-3;
/// Default minimum view count for a listing to enter the vocabulary.
pub const DEFAULT_MIN_COUNT: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    View,
    Book,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::View => f.write_str("view"),
            EventKind::Book => f.write_str("book"),
        }
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "view" => Ok(EventKind::View),
            "book" => Ok(EventKind::Book),
            other => Err(format!("unknown event_kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub listing_key: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub event_kind: EventKind,
}

impl Interaction {
    pub fn view(listing_key: impl Into<String>, timestamp: u64) -> Self {
        Interaction {
            listing_key: listing_key.into(),
            timestamp,
            event_kind: EventKind::View,
        }
    }

    pub fn book(listing_key: impl Into<String>, timestamp: u64) -> Self {
        Interaction {
            listing_key: listing_key.into(),
            timestamp,
            event_kind: EventKind::Book,
        }
    }

    pub fn is_view(&self) -> bool {
        self.event_kind == EventKind::View
    }
}

/// One traveler visit. Interactions are kept sorted by timestamp; equal
/// timestamps keep their input order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    traveler_key: String,
    session_id: String,
    interactions: Vec<Interaction>,
}

impl Session {
    pub fn new(
        traveler_key: impl Into<String>,
        session_id: impl Into<String>,
        mut interactions: Vec<Interaction>,
    ) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::Invalid("session has no interactions".into()));
        }
        // sort_by_key is stable
        interactions.sort_by_key(|i| i.timestamp);
        Ok(Session {
            traveler_key: traveler_key.into(),
            session_id: session_id.into(),
            interactions,
        })
    }

    pub fn traveler_key(&self) -> &str {
        &self.traveler_key
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn views(&self) -> impl Iterator<Item = &Interaction> {
        self.interactions.iter().filter(|i| i.is_view())
    }

    pub fn has_booking(&self) -> bool {
        self.interactions
            .iter()
            .any(|i| i.event_kind == EventKind::Book)
    }

    /// Views preceding the first booking (all views when there is none).
    pub fn view_prefix(&self) -> Vec<&Interaction> {
        self.interactions
            .iter()
            .take_while(|i| i.event_kind != EventKind::Book)
            .filter(|i| i.is_view())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionCorpus {
    sessions: Vec<Session>,
    metadata: BTreeMap<String, String>,
}

impl SessionCorpus {
    pub fn new(sessions: Vec<Session>, metadata: BTreeMap<String, String>) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::NoSessions);
        }
        Ok(SessionCorpus { sessions, metadata })
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Distinct traveler keys in lexicographic order.
    pub fn travelers(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.sessions.iter().map(|s| s.traveler_key()).collect();
        set.into_iter().collect()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn interaction_count(&self) -> usize {
        self.sessions.iter().map(|s| s.interactions.len()).sum()
    }
}

/// Dense listing index built from view frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    key_to_index: HashMap<String, usize>,
    index_to_key: Vec<String>,
    counts: Vec<u64>,
    total_views: u64,
    min_count: u64,
}

impl Vocabulary {
    /// Builds a vocabulary directly from `(key, count)` pairs, applying the
    /// same pruning and ordering rules as [`build_vocabulary`].
    pub fn from_counts<I, K>(counts: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (K, u64)>,
        K: Into<String>,
    {
        if min_count < 1 {
            return Err(Error::config("min_count", "must be at least 1"));
        }
        let mut merged: BTreeMap<String, u64> = BTreeMap::new();
        for (k, c) in counts {
            *merged.entry(k.into()).or_default() += c;
        }
        let mut kept: Vec<(String, u64)> =
            merged.into_iter().filter(|(_, c)| *c >= min_count).collect();
        if kept.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        // frequency descending, then key ascending
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut key_to_index = HashMap::with_capacity(kept.len());
        let mut index_to_key = Vec::with_capacity(kept.len());
        let mut counts = Vec::with_capacity(kept.len());
        for (i, (k, c)) in kept.into_iter().enumerate() {
            key_to_index.insert(k.clone(), i);
            index_to_key.push(k);
            counts.push(c);
        }
        let total_views = counts.iter().sum();
        Ok(Vocabulary {
            key_to_index,
            index_to_key,
            counts,
            total_views,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.index_to_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_key.is_empty()
    }

    pub fn index(&self, key: &str) -> Option<usize> {
        self.key_to_index.get(key).copied()
    }

    pub fn key(&self, index: usize) -> &str {
        &self.index_to_key[index]
    }

    pub fn keys(&self) -> &[String] {
        &self.index_to_key
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts[index]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total_views(&self) -> u64 {
        self.total_views
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    /// Keep probability for each index under threshold `t`.
    pub fn keep_probabilities(&self, threshold: f64) -> Result<Vec<f64>> {
        self.counts
            .iter()
            .map(|&c| subsample_keep_probability(c, self.total_views, threshold))
            .collect()
    }

    /// In-vocabulary view indices of a session, in order.
    pub fn encode_views(&self, session: &Session) -> Vec<usize> {
        session
            .views()
            .filter_map(|i| self.index(&i.listing_key))
            .collect()
    }
}

/// Counts view events per listing and keeps those with at least `min_count`.
pub fn build_vocabulary(corpus: &SessionCorpus, min_count: u64) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for session in corpus.sessions() {
        for view in session.views() {
            *counts.entry(view.listing_key.as_str()).or_default() += 1;
        }
    }
    Vocabulary::from_counts(counts, min_count)
}

/// Probability of keeping one occurrence of a listing with `freq` views out of
/// `total_views`: `min(1, sqrt(t / f_rel))`.
pub fn subsample_keep_probability(freq: u64, total_views: u64, threshold: f64) -> Result<f64> {
    if freq < 1 {
        return Err(Error::config("freq", "must be at least 1"));
    }
    if total_views < freq {
        return Err(Error::config("total_views", "must be at least freq"));
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::config("threshold", "must be positive and finite"));
    }
    let f_rel = freq as f64 / total_views as f64;
    Ok((threshold / f_rel).sqrt().min(1.0))
}

/// Drops view occurrences at random according to the keep rule. Booking
/// events and out-of-vocabulary views are always kept. Sessions left empty
/// are removed.
pub fn apply_subsampling(
    corpus: &SessionCorpus,
    vocabulary: &Vocabulary,
    threshold: f64,
    seed: u64,
) -> Result<SessionCorpus> {
    let keep = vocabulary.keep_probabilities(threshold)?;
    let mut rng = seeded(seed, 0x5ab5);
    let mut sessions = Vec::with_capacity(corpus.len());
    for session in corpus.sessions() {
        let kept: Vec<Interaction> = session
            .interactions()
            .iter()
            .filter(|i| {
                if !i.is_view() {
                    return true;
                }
                match vocabulary.index(&i.listing_key) {
                    Some(idx) if keep[idx] < 1.0 => rng.random::<f64>() < keep[idx],
                    _ => true,
                }
            })
            .cloned()
            .collect();
        if !kept.is_empty() {
            sessions.push(Session {
                traveler_key: session.traveler_key.clone(),
                session_id: session.session_id.clone(),
                interactions: kept,
            });
        }
    }
    SessionCorpus::new(sessions, corpus.metadata.clone())
}

/// Partitions sessions by traveler. Every traveler lands wholly on one side.
pub fn split_by_user(
    corpus: &SessionCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(SessionCorpus, SessionCorpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction", "must lie in (0, 1)"));
    }
    let mut travelers = corpus.travelers();
    let n = travelers.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "split needs at least 2 distinct travelers, found {n}"
        )));
    }
    travelers.shuffle(&mut seeded(seed, 0x5911));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train_set: BTreeSet<&str> = travelers[..n_train].iter().copied().collect();

    let (train, test): (Vec<Session>, Vec<Session>) = corpus
        .sessions()
        .iter()
        .cloned()
        .partition(|s| train_set.contains(s.traveler_key()));

    let tag = |side: &str| {
        let mut m = corpus.metadata.clone();
        m.insert("split".into(), side.into());
        m.insert("split_seed".into(), seed.to_string());
        m.insert("train_fraction".into(), train_fraction.to_string());
        m
    };
    Ok((
        SessionCorpus::new(train, tag("train"))?,
        SessionCorpus::new(test, tag("test"))?,
    ))
}

// ---------------------------------------------------------------------------
// Synthetic clickstream

/// Parameters of the synthetic clickstream generator.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_listings: usize,
    pub n_clusters: usize,
    pub n_travelers: usize,
    pub sessions_per_traveler: usize,
    pub mean_session_len: f64,
    pub booking_base_rate: f64,
    /// Probability that a view ignores the home cluster (ε).
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_listings: 1000,
            n_clusters: 10,
            n_travelers: 10_000,
            sessions_per_traveler: 1,
            mean_session_len: 8.0,
            booking_base_rate: 0.2,
            noise: 0.1,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_listings == 0 {
            return Err(Error::config("n_listings", "must be at least 1"));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_listings {
            return Err(Error::config("n_clusters", "must lie in [1, n_listings]"));
        }
        if self.n_travelers == 0 {
            return Err(Error::config("n_travelers", "must be at least 1"));
        }
        if self.sessions_per_traveler == 0 {
            return Err(Error::config("sessions_per_traveler", "must be at least 1"));
        }
        if !(self.mean_session_len >= 1.0 && self.mean_session_len.is_finite()) {
            return Err(Error::config("mean_session_len", "must be at least 1"));
        }
        if !(self.booking_base_rate > 0.0 && self.booking_base_rate < 1.0) {
            return Err(Error::config("booking_base_rate", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("noise", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Total number of sessions the generator emits.
    pub fn session_count(&self) -> usize {
        self.n_travelers * self.sessions_per_traveler
    }
}

/// Known latent structure of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGroundTruth {
    /// Listing key to cluster id, in generation order.
    pub cluster_of_listing: BTreeMap<String, usize>,
    pub cluster_count: usize,
    pub booking_rule: String,
}

impl SyntheticGroundTruth {
    /// Cluster id per vocabulary index.
    pub fn clusters_for(&self, vocabulary: &Vocabulary) -> Result<Vec<usize>> {
        vocabulary
            .keys()
            .iter()
            .map(|k| {
                self.cluster_of_listing.get(k).copied().ok_or_else(|| Error::Unknown {
                    what: "listing",
                    key: k.clone(),
                })
            })
            .collect()
    }
}

// Booking logit: logit(base) + SAME_WEIGHT * (n_same - E[n_same])
//                - OTHER_WEIGHT * n_other + appeal(home cluster)
const SAME_WEIGHT: f64 = 0.3;
const OTHER_WEIGHT: f64 = 0.8;
const APPEAL_SPAN: f64 = 1.0;
const GAP_MEAN_MS: f64 = 45_000.0;
const EPOCH_START_MS: u64 = 1_561_939_200_000;

fn key_width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

pub fn listing_key(index: usize, n_listings: usize) -> String {
    format!("L{:0w$}", index, w = key_width(n_listings))
}

fn cluster_appeal(cluster: usize, n_clusters: usize) -> f64 {
    if n_clusters == 1 {
        0.0
    } else {
        -APPEAL_SPAN + 2.0 * APPEAL_SPAN * cluster as f64 / (n_clusters - 1) as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates a clickstream with planted cluster structure.
///
/// Listing `i` belongs to cluster `i % n_clusters`. Each traveler draws a home
/// cluster; every view comes from the home cluster with probability `1 - noise`
/// and from the whole catalogue otherwise. Session length is `1 + Geometric`
/// with the configured mean. A session ends in a booking with probability
/// given by the logistic rule stored in `booking_rule`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(SessionCorpus, SyntheticGroundTruth)> {
    config.validate()?;
    let k = config.n_clusters;
    let keys: Vec<String> = (0..config.n_listings)
        .map(|i| listing_key(i, config.n_listings))
        .collect();
    let members: Vec<Vec<usize>> = (0..k)
        .map(|c| (c..config.n_listings).step_by(k).collect())
        .collect();

    let mut rng = seeded(config.seed, 0x6e6e);
    let extra_len = Geometric::new(1.0 / config.mean_session_len)
        .map_err(|e| Error::config("mean_session_len", e.to_string()))?;
    let gap = Exp::new(1.0 / GAP_MEAN_MS).expect("positive rate");
    let base_logit = (config.booking_base_rate / (1.0 - config.booking_base_rate)).ln();
    let expected_same = config.mean_session_len * (1.0 - config.noise + config.noise / k as f64);

    let tw = key_width(config.n_travelers);
    let sw = key_width(config.sessions_per_traveler);
    let mut sessions = Vec::with_capacity(config.session_count());
    for t in 0..config.n_travelers {
        let traveler = format!("T{:0tw$}", t);
        let home = rng.random_range(0..k);
        let mut clock = EPOCH_START_MS + rng.random_range(0..7 * 86_400_000u64);
        for s in 0..config.sessions_per_traveler {
            let len = 1 + extra_len.sample(&mut rng) as usize;
            let mut interactions = Vec::with_capacity(len + 1);
            let mut n_same = 0usize;
            for _ in 0..len {
                let listing = if rng.random::<f64>() < config.noise {
                    rng.random_range(0..config.n_listings)
                } else {
                    members[home][rng.random_range(0..members[home].len())]
                };
                if listing % k == home {
                    n_same += 1;
                }
                clock += 1_000 + gap.sample(&mut rng) as u64;
                interactions.push(Interaction::view(keys[listing].clone(), clock));
            }
            let n_other = len - n_same;
            let logit = base_logit + SAME_WEIGHT * (n_same as f64 - expected_same)
                - OTHER_WEIGHT * n_other as f64
                + cluster_appeal(home, k);
            if rng.random::<f64>() < sigmoid(logit) {
                let booked = members[home][rng.random_range(0..members[home].len())];
                clock += 1_000 + gap.sample(&mut rng) as u64;
                interactions.push(Interaction::book(keys[booked].clone(), clock));
            }
            sessions.push(Session {
                traveler_key: traveler.clone(),
                session_id: format!("s{:0sw$}", s),
                interactions,
            });
            clock += 3_600_000 + rng.random_range(0..86_400_000u64);
        }
    }

    let booking_rule = format!(
        "P(book) = sigmoid(logit({rate}) + {SAME_WEIGHT} * (n_same - {expected_same}) - {OTHER_WEIGHT} * n_other + appeal(home)); \
         appeal(c) = -{APPEAL_SPAN} + {span2} * c / (n_clusters - 1); n_same counts views in the traveler's home cluster",
        rate = config.booking_base_rate,
        span2 = 2.0 * APPEAL_SPAN,
    );
    let mut metadata = BTreeMap::new();
    metadata.insert("source".to_string(), "synthetic".to_string());
    metadata.insert(
        "generator_config".to_string(),
        serde_json::to_string(config)?,
    );
    metadata.insert("booking_rule".to_string(), booking_rule.clone());

    let truth = SyntheticGroundTruth {
        cluster_of_listing: keys.iter().enumerate().map(|(i, key)| (key.clone(), i % k)).collect(),
        cluster_count: k,
        booking_rule,
    };
    Ok((SessionCorpus::new(sessions, metadata)?, truth))
}

// ---------------------------------------------------------------------------
// Session-log format

const METADATA_PREFIX: &str = "#@\t";

/// Writes the tab-separated session log. Metadata entries become `#@` comment
/// lines, which plain readers ignore.
pub fn write_sessions<W: Write>(corpus: &SessionCorpus, mut out: W) -> std::io::Result<()> {
    for (k, v) in &corpus.metadata {
        writeln!(out, "{METADATA_PREFIX}{k}\t{v}")?;
    }
    for s in &corpus.sessions {
        for i in &s.interactions {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                s.traveler_key, s.session_id, i.timestamp, i.listing_key, i.event_kind
            )?;
        }
    }
    Ok(())
}

pub fn save_sessions(corpus: &SessionCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_sessions(corpus, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a session log. Sessions are grouped by `(traveler_key, session_id)`
/// in order of first appearance.
pub fn read_sessions<R: Read>(reader: R) -> Result<SessionCorpus> {
    let mut metadata = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<Interaction>> = HashMap::new();

    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(rest) = line.strip_prefix(METADATA_PREFIX) {
            if let Some((k, v)) = rest.split_once('\t') {
                metadata.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let timestamp: u64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("invalid timestamp {:?}", fields[2])))?;
        let event_kind: EventKind = fields[4].parse().map_err(parse_err)?;
        if fields[0].is_empty() || fields[3].is_empty() {
            return Err(parse_err("empty traveler or listing key".into()));
        }
        let key = (fields[0].to_string(), fields[1].to_string());
        let bucket = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        bucket.push(Interaction {
            listing_key: fields[3].to_string(),
            timestamp,
            event_kind,
        });
    }

    let sessions = order
        .into_iter()
        .map(|key| {
            let interactions = groups.remove(&key).expect("grouped");
            Session::new(key.0, key.1, interactions)
        })
        .collect::<Result<Vec<_>>>()?;
    SessionCorpus::new(sessions, metadata)
}

pub fn load_sessions(path: impl AsRef<Path>) -> Result<SessionCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_sessions(file)
}

/// Writes the `listing_key <TAB> cluster_id` sidecar.
pub fn save_ground_truth(truth: &SyntheticGroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (key, cluster) in &truth.cluster_of_listing {
        writeln!(w, "{key}\t{cluster}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<BTreeMap<String, usize>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (key, cluster) = line.split_once('\t').ok_or(Error::Parse {
            line: n + 1,
            message: "expected listing_key<TAB>cluster_id".into(),
        })?;
        let cluster = cluster.parse().map_err(|_| Error::Parse {
            line: n + 1,
            message: format!("invalid cluster id {cluster:?}"),
        })?;
        map.insert(key.to_string(), cluster);
    }
    Ok(map)
}
