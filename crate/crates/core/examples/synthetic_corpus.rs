//! Generates a clustered session log and prints its shape.

use tripvec::corpus::{build_vocabulary, generate_synthetic, split_by_user, write_sessions, SyntheticConfig};

fn main() -> tripvec::Result<()> {
    let config = SyntheticConfig {
        n_listings: 200,
        n_clusters: 5,
        n_travelers: 1000,
        ..SyntheticConfig::default()
    };
    let (corpus, truth) = generate_synthetic(&config)?;
    let vocab = build_vocabulary(&corpus, 5)?;
    let booked = corpus.sessions().iter().filter(|s| s.has_booking()).count();
    println!("sessions {}, vocabulary {}, booked {}", corpus.len(), vocab.len(), booked);
    println!("booking rule: {}", truth.booking_rule);

    let (train, test) = split_by_user(&corpus, 0.7, 1)?;
    println!("train travelers {}, test travelers {}", train.travelers().len(), test.travelers().len());

    let mut head = Vec::new();
    write_sessions(&train, &mut head).expect("writing to memory");
    for line in String::from_utf8_lossy(&head).lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
