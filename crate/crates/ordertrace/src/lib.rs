//! Training-order independence tests for language-model provenance.
//!
//! A training run visits its data in a (shuffled) order. Models retain a
//! recency gradient over that order, so an artifact derived from the run
//! (generated text, or the model itself) correlates with the step at which
//! each example was visited, while an independent artifact cannot: the order
//! was drawn after the data was fixed. Everything in this crate reduces to
//! measuring such a correlation and attaching an honest p-value to it.
//!
//! The crate is organized around three statistics plus the machinery they
//! share:
//!
//! * [`query`] scores training examples under a subject model and correlates
//!   likelihood with training step.
//! * [`ngram`] matches a text against a partitioned n-gram index of the run
//!   and correlates match counts with partition recency.
//! * [`shuffle`] retrains the tail of a run under reshuffled orders and asks
//!   whether the real order predicts a text better than reshuffles do.
//! * [`stats`] holds the rank statistics and the exact permutation engine;
//!   [`transcript`] the training-run representation; [`toylm`] a small
//!   decayed-count n-gram model used as a stand-in trainer; [`harness`] the
//!   simulation scenarios used for calibration and power measurement.
//!
//! All randomness flows through [`rng::RandomSource`], a seeded stream tree,
//! so every result is reproducible bit for bit at any thread count.

pub mod dist;
pub mod error;
pub mod harness;
pub mod lm;
pub mod ngram;
pub mod query;
pub mod rng;
pub mod shuffle;
pub mod stats;
pub mod toylm;
pub mod transcript;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
