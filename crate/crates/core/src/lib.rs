//! Session-based listing embeddings and traveler booking-intent models.
//!
//! The pipeline has two stages. Listing embeddings are trained from view
//! sessions with skip-gram negative sampling ([`skipgram`]), and listings
//! without history get an embedding extrapolated from destination demand
//! ([`coldstart`]). Traveler embeddings are then learned by booking-prediction
//! networks over the viewed listings' embeddings ([`traveler`]), built on the
//! small dense-network kernels in [`neural`]. [`eval`] measures how much those
//! traveler embeddings add to a downstream booking-intent classifier.
//!
//! Runnable walkthroughs live in `examples/`; the `tripvec` binary drives the
//! whole pipeline from a JSON config (see [`pipeline`]).

pub mod coldstart;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod neural;
pub mod pipeline;
pub mod rng;
pub mod skipgram;
pub mod traveler;

pub use error::{Error, Result};
