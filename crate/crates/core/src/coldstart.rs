//! Embeddings for listings with no interactions.
//!
//! Trained listing vectors are averaged into one vector per destination,
//! weighted by the share of each listing's demand that destination drives.
//! A cold listing then receives the expectation of destination vectors under a
//! belief about where its demand will come from, built from its coordinates.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::skipgram::{EmbeddingTable, KeyedVectors};

/// Tolerance on a listing's (or belief's) proportions summing to one.
pub const PROPORTION_TOLERANCE: f64 = 1e-6;
/// Distance offset that keeps inverse-distance weights finite at zero range.
pub const DISTANCE_SMOOTHING_KM: f64 = 1.0;
pub const DEFAULT_NEAREST_DESTINATIONS: usize = 5;
const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Anything exposing dense rows by index.
pub trait RowSource {
    fn row_count(&self) -> usize;
    fn dim(&self) -> usize;
    fn vector(&self, index: usize) -> &[f64];
}

impl RowSource for EmbeddingTable {
    fn row_count(&self) -> usize {
        self.vocab_size()
    }
    fn dim(&self) -> usize {
        EmbeddingTable::dim(self)
    }
    fn vector(&self, index: usize) -> &[f64] {
        self.input_row(index)
    }
}

impl RowSource for KeyedVectors {
    fn row_count(&self) -> usize {
        self.len()
    }
    fn dim(&self) -> usize {
        KeyedVectors::dim(self)
    }
    fn vector(&self, index: usize) -> &[f64] {
        self.row(index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemandRow {
    pub listing_index: usize,
    pub destination_id: String,
    pub proportion: f64,
}

/// Per-listing demand shares over destinations.
#[derive(Clone, Debug, PartialEq)]
pub struct DestinationDemand {
    rows: Vec<DemandRow>,
}

impl DestinationDemand {
    pub fn new(rows: Vec<DemandRow>) -> Result<Self> {
        let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
        for r in &rows {
            if !(0.0..=1.0).contains(&r.proportion) {
                return Err(Error::Invalid(format!(
                    "proportion {} for listing {} outside [0, 1]",
                    r.proportion, r.listing_index
                )));
            }
            *totals.entry(r.listing_index).or_default() += r.proportion;
        }
        if let Some((l, s)) = totals
            .iter()
            .find(|(_, s)| (**s - 1.0).abs() > PROPORTION_TOLERANCE)
        {
            return Err(Error::Invalid(format!(
                "demand proportions of listing {l} sum to {s}, expected 1"
            )));
        }
        Ok(DestinationDemand { rows })
    }

    pub fn rows(&self) -> &[DemandRow] {
        &self.rows
    }

    /// Resolves keyed records against `vectors`. Records for listings absent
    /// from `vectors` are dropped when `skip_unknown` is set, otherwise they
    /// are an error.
    pub fn from_records(records: &[DemandRecord], vectors: &KeyedVectors, skip_unknown: bool) -> Result<Self> {
        let mut rows = Vec::with_capacity(records.len());
        for r in records {
            match vectors.index(&r.listing_key) {
                Some(listing_index) => rows.push(DemandRow {
                    listing_index,
                    destination_id: r.destination_id.clone(),
                    proportion: r.proportion,
                }),
                None if skip_unknown => {}
                None => {
                    return Err(Error::Unknown {
                        what: "listing",
                        key: r.listing_key.clone(),
                    })
                }
            }
        }
        Self::new(rows)
    }
}

/// One vector per destination plus how many listings contributed to it.
#[derive(Clone, Debug, PartialEq)]
pub struct DestinationEmbedding {
    pub vectors: BTreeMap<String, Vec<f64>>,
    pub support: BTreeMap<String, usize>,
}

/// `v_d = sum_l p_ld v_l / N_d` with `N_d = sum_l p_ld`. Destinations with no
/// positive demand are omitted.
pub fn destination_embeddings<T: RowSource + ?Sized>(
    table: &T,
    demand: &DestinationDemand,
) -> Result<DestinationEmbedding> {
    let d = table.dim();
    let mut acc: BTreeMap<&str, (Vec<f64>, f64, usize)> = BTreeMap::new();
    for r in demand.rows() {
        if r.listing_index >= table.row_count() {
            return Err(Error::Unknown {
                what: "listing index",
                key: r.listing_index.to_string(),
            });
        }
        if r.proportion == 0.0 {
            continue;
        }
        let entry = acc
            .entry(r.destination_id.as_str())
            .or_insert_with(|| (vec![0.0; d], 0.0, 0));
        for (s, x) in entry.0.iter_mut().zip(table.vector(r.listing_index)) {
            *s += r.proportion * x;
        }
        entry.1 += r.proportion;
        entry.2 += 1;
    }
    let mut vectors = BTreeMap::new();
    let mut support = BTreeMap::new();
    for (dest, (sum, n, count)) in acc {
        let v: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("destination {dest} vector is not finite")));
        }
        vectors.insert(dest.to_string(), v);
        support.insert(dest.to_string(), count);
    }
    Ok(DestinationEmbedding { vectors, support })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    latitude: f64,
    longitude: f64,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(Error::Invalid(format!("latitude {latitude} outside [-90, 90]")));
        }
        if !(longitude > -180.0 && longitude <= 180.0) {
            return Err(Error::Invalid(format!("longitude {longitude} outside (-180, 180]")));
        }
        Ok(GeoPoint {
            latitude,
            longitude,
        })
    }

    pub fn latitude(&self) -> f64 {
        self.latitude
    }

    pub fn longitude(&self) -> f64 {
        self.longitude
    }

    /// Haversine great-circle distance in kilometres.
    pub fn distance_km(&self, other: &GeoPoint) -> f64 {
        let (p1, p2) = (self.latitude.to_radians(), other.latitude.to_radians());
        let dp = p2 - p1;
        let dl = (other.longitude - self.longitude).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
    }
}

/// Demand belief for a location: the `m_nearest` destinations by great-circle
/// distance weighted by `1 / (distance_km + 1)`, normalized to sum to one.
/// Equal distances are broken by destination id.
pub fn demand_belief_from_location(
    point: &GeoPoint,
    destination_centroids: &BTreeMap<String, GeoPoint>,
    m_nearest: usize,
) -> Result<BTreeMap<String, f64>> {
    if m_nearest < 1 {
        return Err(Error::config("m_nearest", "must be at least 1"));
    }
    if destination_centroids.is_empty() {
        return Err(Error::Invalid("no destination centroids".into()));
    }
    let mut ranked: Vec<(&String, f64)> = destination_centroids
        .iter()
        .map(|(id, c)| (id, point.distance_km(c)))
        .collect();
    // BTreeMap iteration is already ordered by id, so a stable sort keeps ties that way
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    ranked.truncate(m_nearest);
    let weights: Vec<f64> = ranked
        .iter()
        .map(|(_, dist)| 1.0 / (dist + DISTANCE_SMOOTHING_KM))
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(ranked
        .into_iter()
        .zip(weights)
        .map(|((id, _), w)| (id.clone(), w / total))
        .collect())
}

/// `v_cold = sum_d p_d v_d`.
pub fn extrapolate_cold(
    belief: &BTreeMap<String, f64>,
    dest_embeddings: &DestinationEmbedding,
) -> Result<Vec<f64>> {
    let total: f64 = belief.values().sum();
    if (total - 1.0).abs() > PROPORTION_TOLERANCE || belief.values().any(|p| *p < 0.0) {
        return Err(Error::Invalid(format!(
            "belief proportions sum to {total}, expected 1"
        )));
    }
    let mut referenced = Vec::with_capacity(belief.len());
    for (dest, &p) in belief {
        let v = dest_embeddings.vectors.get(dest).ok_or_else(|| Error::Unknown {
            what: "destination",
            key: dest.clone(),
        })?;
        referenced.push((p, v));
    }
    let d = referenced[0].1.len();
    let mut out = vec![0.0; d];
    for (p, v) in &referenced {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += p * x;
        }
    }
    // Rounding can push a coordinate one ulp past the hull of its inputs.
    for (j, o) in out.iter_mut().enumerate() {
        let lo = referenced.iter().map(|(_, v)| v[j]).fold(f64::INFINITY, f64::min);
        let hi = referenced.iter().map(|(_, v)| v[j]).fold(f64::NEG_INFINITY, f64::max);
        *o = o.clamp(lo, hi);
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("extrapolated vector is not finite".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSV files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandRecord {
    pub listing_key: String,
    pub destination_id: String,
    pub proportion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidRecord {
    pub destination_id: String,
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdListingRecord {
    pub listing_key: String,
    pub latitude: f64,
    pub longitude: f64,
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn centroid_map(records: &[CentroidRecord]) -> Result<BTreeMap<String, GeoPoint>> {
    records
        .iter()
        .map(|r| Ok((r.destination_id.clone(), GeoPoint::new(r.latitude, r.longitude)?)))
        .collect()
}

/// Destinations, demand shares and cold listings derived from a synthetic
/// corpus's clusters: one destination per cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGeography {
    pub centroids: Vec<CentroidRecord>,
    pub demand: Vec<DemandRecord>,
    pub cold_listings: Vec<ColdListingRecord>,
}

pub fn destination_id(cluster: usize) -> String {
    format!("D{cluster:03}")
}

/// Each listing sends `home_share` of its demand to its cluster's destination
/// and the rest to one other destination. Cold listings sit within roughly
/// 20 km of a random destination.
pub fn synthetic_geography(
    cluster_of_listing: &BTreeMap<String, usize>,
    n_clusters: usize,
    n_cold: usize,
    seed: u64,
) -> Result<SyntheticGeography> {
    const HOME_SHARE: f64 = 0.8;
    if n_clusters == 0 {
        return Err(Error::config("n_clusters", "must be at least 1"));
    }
    let mut rng = seeded(seed, 0x9e0);
    let centroids: Vec<CentroidRecord> = (0..n_clusters)
        .map(|c| CentroidRecord {
            destination_id: destination_id(c),
            latitude: rng.random_range(25.0..48.0),
            longitude: rng.random_range(-124.0..-70.0),
        })
        .collect();
    let mut demand = Vec::with_capacity(2 * cluster_of_listing.len());
    for (key, &c) in cluster_of_listing {
        if n_clusters == 1 {
            demand.push(DemandRecord {
                listing_key: key.clone(),
                destination_id: destination_id(c),
                proportion: 1.0,
            });
            continue;
        }
        let mut other = rng.random_range(0..n_clusters - 1);
        if other >= c {
            other += 1;
        }
        demand.push(DemandRecord {
            listing_key: key.clone(),
            destination_id: destination_id(c),
            proportion: HOME_SHARE,
        });
        demand.push(DemandRecord {
            listing_key: key.clone(),
            destination_id: destination_id(other),
            proportion: 1.0 - HOME_SHARE,
        });
    }
    let width = n_cold.saturating_sub(1).max(1).to_string().len();
    let cold_listings = (0..n_cold)
        .map(|i| {
            let anchor = &centroids[rng.random_range(0..n_clusters)];
            ColdListingRecord {
                listing_key: format!("C{i:0width$}"),
                latitude: anchor.latitude + rng.random_range(-0.2..0.2),
                longitude: anchor.longitude + rng.random_range(-0.2..0.2),
            }
        })
        .collect();
    Ok(SyntheticGeography {
        centroids,
        demand,
        cold_listings,
    })
}
