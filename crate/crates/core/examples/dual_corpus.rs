//! Embeddings trained on one session log, traveler models on another.
//! The embedding corpus is the full log; the booking corpus is a later,
//! disjoint set of travelers.

use tripvec::corpus::{generate_synthetic, save_sessions, SyntheticConfig};
use tripvec::pipeline::*;
use tripvec::traveler::ModelKind;

fn main() -> tripvec::Result<()> {
    let root = std::env::temp_dir().join("tripvec-dual");
    let (embed_dir, booking_dir) = (root.join("embed"), root.join("booking"));
    for d in [&embed_dir, &booking_dir] {
        std::fs::create_dir_all(d).map_err(|e| tripvec::Error::io(d, e))?;
    }

    let mut embed = PipelineConfig::default();
    embed.paths.out_dir = embed_dir.clone();
    cmd_generate(&embed)?;
    cmd_train_embeddings(&embed)?;

    let (bookings, _) = generate_synthetic(&SyntheticConfig {
        n_travelers: 4000,
        seed: 2,
        ..SyntheticConfig::default()
    })?;
    let booking_log = booking_dir.join("bookings.tsv");
    save_sessions(&bookings, &booking_log)?;

    let mut booking = PipelineConfig::default();
    booking.paths.out_dir = booking_dir.clone();
    booking.paths.sessions = Some(booking_log);
    booking.eval.settings = ["handcrafted", "dan"].map(String::from).to_vec();
    cmd_train_embeddings(&booking)?;
    // Swap in the vectors learned from the embedding corpus.
    let from = embed.out(EMBEDDINGS_TEXT_FILE);
    let to = booking.out(EMBEDDINGS_TEXT_FILE);
    std::fs::copy(&from, &to).map_err(|e| tripvec::Error::io(&to, e))?;
    cmd_train_traveler(&booking, ModelKind::Dan)?;
    for r in cmd_evaluate(&booking, &booking.settings()?)? {
        println!("{:<20} auc {:.4} f1 {:.4}", r.feature_set, r.auc, r.f1);
    }
    Ok(())
}
