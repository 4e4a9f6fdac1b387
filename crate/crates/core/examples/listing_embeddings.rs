//! Trains skip-gram listing embeddings and prints nearest neighbors.

use tripvec::corpus::{build_vocabulary, generate_synthetic, SyntheticConfig};
use tripvec::skipgram::{nearest_neighbors, train_embeddings, SkipgramConfig};

fn main() -> tripvec::Result<()> {
    let (corpus, truth) = generate_synthetic(&SyntheticConfig {
        n_listings: 300,
        n_clusters: 6,
        n_travelers: 3000,
        ..SyntheticConfig::default()
    })?;
    let vocab = build_vocabulary(&corpus, 5)?;
    let trained = train_embeddings(&corpus, &vocab, &SkipgramConfig::default())?;
    for (epoch, loss) in trained.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {loss:.4}", epoch + 1);
    }

    let clusters = truth.clusters_for(&vocab)?;
    for probe in [0, 1, 2] {
        println!("{} (cluster {}):", vocab.key(probe), clusters[probe]);
        for (j, sim) in nearest_neighbors(&trained.table, probe, 5)? {
            println!("  {} cluster {} cosine {sim:.3}", vocab.key(j), clusters[j]);
        }
    }
    Ok(())
}
