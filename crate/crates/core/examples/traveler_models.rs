//! Trains every traveler model kind on booking intent and compares test AUC.

use tripvec::corpus::{build_vocabulary, generate_synthetic, split_by_user, SyntheticConfig};
use tripvec::skipgram::{train_embeddings, SkipgramConfig};
use tripvec::eval::{auc, ScoredSet};
use tripvec::traveler::{
    examples_from_prefixes, session_prefixes, train_traveler_model, ModelKind, TravelerConfig,
    DEFAULT_MAX_PREFIX,
};

fn main() -> tripvec::Result<()> {
    let (corpus, _) = generate_synthetic(&SyntheticConfig::default())?;
    let (train, test) = split_by_user(&corpus, 0.7, 1)?;
    let vocab = build_vocabulary(&train, 5)?;
    let vectors = train_embeddings(&train, &vocab, &SkipgramConfig::default())?.table.keyed(&vocab)?;
    let examples = |c| examples_from_prefixes(&session_prefixes(c, &vectors), &vectors, DEFAULT_MAX_PREFIX);
    let (train_ex, test_ex) = (examples(&train)?, examples(&test)?);

    let config = TravelerConfig {
        epochs: 10,
        ..TravelerConfig::default()
    };
    for kind in ModelKind::TRAINABLE {
        let trained = train_traveler_model(&train_ex, kind, &config)?;
        let last = trained.loss_trace.last().unwrap();
        let mut scores = Vec::new();
        for ex in &test_ex {
            scores.push(trained.model.booking_probability(&ex.viewed)?.unwrap());
        }
        let labels = test_ex.iter().map(|ex| ex.label).collect();
        println!(
            "{kind:<15} final loss {:.4}  test auc {:.3}  embedding dim {}",
            last.mean_loss,
            auc(&ScoredSet::new(scores, labels)?)?,
            trained.model.embedding_dim()
        );
    }
    Ok(())
}
