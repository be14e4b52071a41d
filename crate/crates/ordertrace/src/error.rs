//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong short of an I/O failure is a precondition
/// violation or a degenerate input; each gets its own variant so callers can
/// match on the condition rather than parse a message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("requested {requested} entries from a transcript holding {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("epoch index {0} does not exist")]
    UnknownEpoch(usize),

    #[error("epoch index {0} covers no transcript entries")]
    EmptyEpoch(usize),

    #[error("non-finite value at index {0}")]
    NonFiniteInput(usize),

    #[error("ranks have zero variance; correlation is undefined")]
    DegenerateRanks,

    #[error("design matrix is rank deficient")]
    SingularDesign,

    #[error("need at least {min} scorable examples, found {found}")]
    TooFewExamples { min: usize, found: usize },

    #[error("record {0} is missing a reference log-likelihood")]
    MissingReference(usize),

    #[error("{requested} partitions requested but only {max} are possible")]
    TooManyPartitions { requested: usize, max: usize },

    #[error("match profile is constant across partitions; no ordering signal")]
    DegenerateProfile,

    #[error("reshuffled-order statistics have zero spread; z is undefined")]
    DegenerateNullSpread,

    #[error("token {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },

    #[error("scoring window [{start}, {end}) does not fit a document of length {len}")]
    WindowOutOfRange { start: usize, end: usize, len: usize },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("documents must contain at least one token")]
    EmptyDocument,

    #[error("invalid transcript: {0}")]
    InvalidTranscript(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("malformed {format} data: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
