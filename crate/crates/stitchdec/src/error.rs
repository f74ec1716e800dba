//! Error type shared across the decoding engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid block schedule: {0}")]
    InvalidSchedule(String),

    /// Advancing past the final block of an utterance.
    #[error("utterance exhausted: block {0} is the final block")]
    UtteranceExhausted(usize),

    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),

    #[error("invalid attention: {0}")]
    InvalidAttention(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),

    #[error("scorer contract violated: {0}")]
    ScorerContract(String),

    #[error("invalid metrics input: {0}")]
    InvalidMetrics(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
