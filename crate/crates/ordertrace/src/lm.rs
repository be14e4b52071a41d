//! Model-facing abstractions: what a subject model must expose for the
//! tests, and what a trainer must expose for retraining-based tests.

use rand_chacha::ChaCha8Rng;

use crate::rng::RandomSource;
use crate::transcript::{Document, TokenId, Transcript};
use crate::Result;

/// The query surface of an autoregressive language model.
///
/// `log_prob` must equal the chain-rule sum of `conditional_log_prob` over
/// the document; the default implementation guarantees it. Implementations
/// must be deterministic given their state, with all sampling randomness
/// supplied by the caller.
pub trait LanguageModel {
    fn vocab_size(&self) -> u32;

    /// Natural-log probability of `token` following `context`. The context
    /// may be empty.
    fn conditional_log_prob(&self, context: &[u32], token: TokenId) -> f64;

    /// Sum of per-token conditional log-probabilities; always <= 0.
    fn log_prob(&self, doc: &Document) -> f64 {
        let ids = doc.ids();
        (0..ids.len())
            .map(|i| self.conditional_log_prob(&ids[..i], TokenId(ids[i])))
            .sum()
    }

    /// Draws one token from P(. | prefix) at temperature 1.
    fn sample_next(&self, prefix: &[u32], rng: &mut ChaCha8Rng) -> TokenId;
}

/// A training procedure that can start from a checkpoint, so the tail of a
/// run can be replayed under reshuffled orders.
pub trait Trainer: Sync {
    type Model: LanguageModel + Clone + Send + Sync;
    type Checkpoint: Clone + Send + Sync;

    /// Trains over `t` in step order, from scratch or from a checkpoint.
    /// Must be deterministic given (checkpoint, transcript, seed).
    fn train(
        &self,
        t: &Transcript,
        from: Option<&Self::Checkpoint>,
        r: &RandomSource,
    ) -> Result<Self::Model>;

    /// Captures the model's full training state.
    fn checkpoint(&self, model: &Self::Model) -> Self::Checkpoint;

    /// Content hash of a checkpoint, for report auditability.
    fn checkpoint_hash(&self, c: &Self::Checkpoint) -> String;

    /// Returns an adapted copy trained further on `docs` for `passes`
    /// passes; the input model is untouched.
    fn finetune(&self, model: &Self::Model, docs: &[Document], passes: usize)
        -> Result<Self::Model>;
}
