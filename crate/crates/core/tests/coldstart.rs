use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tripvec::coldstart::*;
use tripvec::rng::seeded;
use tripvec::skipgram::{EmbeddingTable, KeyedVectors};

fn random_vectors(n: usize, d: usize, seed: u64) -> KeyedVectors {
    let mut rng = seeded(seed, 2);
    let keys = (0..n).map(|i| format!("L{i:03}")).collect();
    let data = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    KeyedVectors::new(keys, d, data).unwrap()
}

/// Each listing spreads its demand over 1 to 4 of `n_dest` destinations.
fn random_demand(n_listings: usize, n_dest: usize, seed: u64) -> Vec<DemandRow> {
    let mut rng = seeded(seed, 3);
    let mut rows = Vec::new();
    for l in 0..n_listings {
        let mut dests: Vec<usize> = (0..n_dest).collect();
        dests.shuffle(&mut rng);
        let k = rng.random_range(1..=4.min(n_dest));
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = w.iter().sum();
        for (d, wi) in dests[..k].iter().zip(&w) {
            rows.push(DemandRow {
                listing_index: l,
                destination_id: format!("D{d}"),
                proportion: wi / total,
            });
        }
    }
    rows
}

fn brute_destination_means(rows: &[DemandRow], vectors: &KeyedVectors) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    let dests: std::collections::BTreeSet<&String> = rows.iter().map(|r| &r.destination_id).collect();
    for dest in dests {
        let mine: Vec<&DemandRow> = rows.iter().filter(|r| &r.destination_id == dest).collect();
        let n: f64 = mine.iter().map(|r| r.proportion).sum();
        let v: Vec<f64> = (0..vectors.dim())
            .map(|j| mine.iter().map(|r| r.proportion * vectors.row(r.listing_index)[j]).sum::<f64>() / n)
            .collect();
        out.insert(dest.clone(), v);
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn point_mass_reproduces_vectors_bit_exactly() {
    let vectors = random_vectors(10, 7, 1);
    for l in 0..10 {
        let demand = DestinationDemand::new(vec![DemandRow {
            listing_index: l,
            destination_id: "A".into(),
            proportion: 1.0,
        }])
        .unwrap();
        let dest = destination_embeddings(&vectors, &demand).unwrap();
        assert_eq!(dest.vectors["A"], vectors.row(l));
        assert_eq!(dest.support["A"], 1);
        let belief = BTreeMap::from([("A".to_string(), 1.0)]);
        assert_eq!(extrapolate_cold(&belief, &dest).unwrap(), vectors.row(l));
    }
}

#[test]
fn fifty_listing_demand_matches_weighted_mean() {
    for seed in 0..20 {
        let vectors = random_vectors(50, 8, seed);
        let rows = random_demand(50, 6, seed);
        let expected = brute_destination_means(&rows, &vectors);
        let got = destination_embeddings(&vectors, &DestinationDemand::new(rows).unwrap()).unwrap();
        assert_eq!(got.vectors.len(), expected.len());
        for (k, v) in &expected {
            assert!(max_abs_diff(&got.vectors[k], v) <= 1e-12);
        }
    }
}

#[test]
fn ten_destination_belief_matches_weighted_sum() {
    let vectors = random_vectors(60, 5, 4);
    let rows = random_demand(60, 10, 4);
    let dest = destination_embeddings(&vectors, &DestinationDemand::new(rows).unwrap()).unwrap();
    let mut rng = seeded(8, 0);
    for _ in 0..50 {
        let w: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        let total: f64 = w.iter().sum();
        let belief: BTreeMap<String, f64> = w.iter().enumerate().map(|(i, x)| (format!("D{i}"), x / total)).collect();
        let expected: Vec<f64> = (0..5)
            .map(|j| belief.iter().map(|(d, p)| p * dest.vectors[d][j]).sum())
            .collect();
        assert!(max_abs_diff(&extrapolate_cold(&belief, &dest).unwrap(), &expected) <= 1e-12);
    }
}

#[test]
fn reordering_demand_rows_is_harmless() {
    let vectors = random_vectors(40, 6, 2);
    let mut rows = random_demand(40, 5, 2);
    let base = destination_embeddings(&vectors, &DestinationDemand::new(rows.clone()).unwrap()).unwrap();
    let mut rng = seeded(2, 9);
    for _ in 0..10 {
        rows.shuffle(&mut rng);
        let again = destination_embeddings(&vectors, &DestinationDemand::new(rows.clone()).unwrap()).unwrap();
        assert_eq!(again.support, base.support);
        for (k, v) in &base.vectors {
            assert!(max_abs_diff(&again.vectors[k], v) <= 1e-12);
        }
    }
}

#[test]
fn warm_listing_round_trips_through_its_own_destination() {
    let mut table = EmbeddingTable::zeros(5, 4);
    let mut rng = seeded(6, 0);
    for i in 0..5 {
        for x in table.input_row_mut(i) {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    let mut rows = random_demand(5, 3, 1);
    rows.retain(|r| r.listing_index != 2);
    rows.push(DemandRow {
        listing_index: 2,
        destination_id: "solo".into(),
        proportion: 1.0,
    });
    let dest = destination_embeddings(&table, &DestinationDemand::new(rows).unwrap()).unwrap();
    let belief = BTreeMap::from([("solo".to_string(), 1.0)]);
    assert_eq!(extrapolate_cold(&belief, &dest).unwrap(), table.input_row(2));
}

#[test]
fn five_centroids_nearest_three_by_hand() {
    // Points on the equator: great-circle distance is R times the longitude gap.
    let r = 6371.0088_f64;
    let lons = [0.0, 1.0, 2.5, -4.0, 10.0];
    let centroids: BTreeMap<String, GeoPoint> = lons
        .iter()
        .enumerate()
        .map(|(i, &lon)| (format!("D{i}"), GeoPoint::new(0.0, lon).unwrap()))
        .collect();
    let here = GeoPoint::new(0.0, 0.5).unwrap();
    let belief = demand_belief_from_location(&here, &centroids, 3).unwrap();

    let dist = |lon: f64| r * (lon - 0.5_f64).abs().to_radians();
    let nearest = [("D0", 0.0), ("D1", 1.0), ("D2", 2.5)];
    let w: Vec<f64> = nearest.iter().map(|(_, lon)| 1.0 / (dist(*lon) + 1.0)).collect();
    let total: f64 = w.iter().sum();
    assert_eq!(belief.len(), 3);
    for ((id, _), wi) in nearest.iter().zip(&w) {
        assert!((belief[*id] - wi / total).abs() <= 1e-9, "{id}");
    }
}

#[test]
fn belief_edge_cases() {
    let a = GeoPoint::new(10.0, 20.0).unwrap();
    let b = GeoPoint::new(10.0, 22.0).unwrap();
    let centroids = BTreeMap::from([("A".to_string(), a), ("B".to_string(), b)]);
    let at_a = demand_belief_from_location(&a, &centroids, 1).unwrap();
    assert_eq!(at_a, BTreeMap::from([("A".to_string(), 1.0)]));
    let mid = GeoPoint::new(0.0, 0.0).unwrap();
    let sym = BTreeMap::from([
        ("E".to_string(), GeoPoint::new(0.0, 1.0).unwrap()),
        ("W".to_string(), GeoPoint::new(0.0, -1.0).unwrap()),
    ]);
    let split = demand_belief_from_location(&mid, &sym, 2).unwrap();
    assert!((split["E"] - 0.5).abs() < 1e-12 && (split["W"] - 0.5).abs() < 1e-12);
    // Equidistant with m = 1: the smaller id wins.
    assert_eq!(demand_belief_from_location(&mid, &sym, 1).unwrap().keys().next().unwrap(), "E");
    assert!(demand_belief_from_location(&mid, &BTreeMap::new(), 1).is_err());
}

fn geo() -> impl Strategy<Value = GeoPoint> {
    (-90.0f64..=90.0, -179.999f64..=180.0).prop_map(|(a, b)| GeoPoint::new(a, b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn belief_is_normalized(here in geo(), points in prop::collection::vec(geo(), 1..12), m in 1usize..8) {
        let centroids: BTreeMap<String, GeoPoint> =
            points.into_iter().enumerate().map(|(i, p)| (format!("D{i:02}"), p)).collect();
        let belief = demand_belief_from_location(&here, &centroids, m).unwrap();
        prop_assert_eq!(belief.len(), m.min(centroids.len()));
        prop_assert!(belief.values().all(|&p| p > 0.0));
        prop_assert!((belief.values().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn extrapolation_stays_in_hull(seed in any::<u64>(), n_dest in 1usize..8, d in 1usize..6) {
        let mut rng = seeded(seed, 0);
        let vectors: BTreeMap<String, Vec<f64>> = (0..n_dest)
            .map(|i| (format!("D{i}"), (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()))
            .collect();
        let support = vectors.keys().map(|k| (k.clone(), 1)).collect();
        let dest = DestinationEmbedding { vectors, support };
        let w: Vec<f64> = (0..n_dest).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = w.iter().sum();
        let belief: BTreeMap<String, f64> =
            w.iter().enumerate().map(|(i, x)| (format!("D{i}"), x / total)).collect();
        let out = extrapolate_cold(&belief, &dest).unwrap();
        for (j, x) in out.iter().enumerate() {
            let col = dest.vectors.values().map(|v| v[j]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= *x && *x <= hi);
        }
    }
}

#[test]
fn extrapolation_errors_name_the_problem() {
    let dest = DestinationEmbedding {
        vectors: BTreeMap::from([("A".to_string(), vec![1.0])]),
        support: BTreeMap::from([("A".to_string(), 1)]),
    };
    let missing = BTreeMap::from([("B".to_string(), 1.0)]);
    assert!(extrapolate_cold(&missing, &dest).unwrap_err().to_string().contains('B'));
    let loose = BTreeMap::from([("A".to_string(), 0.7)]);
    assert!(extrapolate_cold(&loose, &dest).is_err());
    let vectors = random_vectors(2, 1, 0);
    let unknown = DestinationDemand::new(vec![DemandRow {
        listing_index: 7,
        destination_id: "A".into(),
        proportion: 1.0,
    }])
    .unwrap();
    assert!(destination_embeddings(&vectors, &unknown).unwrap_err().to_string().contains('7'));
}

#[test]
fn csv_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![
        CentroidRecord {
            destination_id: "D0".into(),
            latitude: 40.5,
            longitude: -73.25,
        },
        CentroidRecord {
            destination_id: "D1".into(),
            latitude: -33.0,
            longitude: 151.0,
        },
    ];
    let path = dir.path().join("c.csv");
    write_csv(&path, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("destination_id,latitude,longitude\n"));
    let back: Vec<CentroidRecord> = read_csv(&path).unwrap();
    assert_eq!(back, records);
    assert_eq!(centroid_map(&back).unwrap().len(), 2);
}
