//! Places unseen listings in embedding space from their location.

use tripvec::coldstart::{
    centroid_map, demand_belief_from_location, destination_embeddings, extrapolate_cold, synthetic_geography,
    DestinationDemand, GeoPoint,
};
use tripvec::corpus::{build_vocabulary, generate_synthetic, SyntheticConfig};
use tripvec::skipgram::{cosine, train_embeddings, SkipgramConfig};

fn main() -> tripvec::Result<()> {
    let (corpus, truth) = generate_synthetic(&SyntheticConfig {
        n_listings: 200,
        n_clusters: 5,
        n_travelers: 2000,
        ..SyntheticConfig::default()
    })?;
    let vocab = build_vocabulary(&corpus, 5)?;
    let vectors = train_embeddings(&corpus, &vocab, &SkipgramConfig::default())?.table.keyed(&vocab)?;
    let geo = synthetic_geography(&truth.cluster_of_listing, truth.cluster_count, 3, 1)?;

    let demand = DestinationDemand::from_records(&geo.demand, &vectors, true)?;
    let dest = destination_embeddings(&vectors, &demand)?;
    let centroids = centroid_map(&geo.centroids)?;
    for cold in &geo.cold_listings {
        let here = GeoPoint::new(cold.latitude, cold.longitude)?;
        let belief = demand_belief_from_location(&here, &centroids, 5)?;
        let v = extrapolate_cold(&belief, &dest)?;
        let (top, p) = belief.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        println!(
            "{} at ({:.2}, {:.2}): top destination {top} ({p:.2}), cosine to it {:.3}",
            cold.listing_key,
            cold.latitude,
            cold.longitude,
            cosine(&v, &dest.vectors[top])
        );
    }
    Ok(())
}
