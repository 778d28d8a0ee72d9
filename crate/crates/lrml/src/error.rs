//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset construction, training, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("cannot open {path}: {source}")]
    FileOpen {
        path: String,
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed event line: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("no events in {path}")]
    EmptyEventFile { path: String },

    #[error("min_interactions must be at least 1")]
    InvalidMinInteractions,

    #[error("empty after filtering")]
    EmptyAfterFiltering,

    #[error("user {user} has {count} interactions, need at least 3 to split")]
    TooFewInteractions { user: usize, count: usize },

    #[error(
        "insufficient negatives for user {user}: {available} non-interacted items, need {needed}"
    )]
    InsufficientNegatives {
        user: usize,
        available: usize,
        needed: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("non-finite gradient in parameter block {block}")]
    NonFiniteGradient { block: &'static str },

    #[error("non-finite preference score at candidate {candidate}")]
    NonFiniteScore { candidate: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),

    #[error("model kind {kind} does not support {operation}")]
    UnsupportedOperation { kind: String, operation: String },

    #[error("timestamps missing: {0}")]
    MissingTimestamps(String),

    #[error("degenerate timestamps: all values equal, cannot bin")]
    DegenerateTimestamps,

    #[error("{0}")]
    Analysis(String),
}

pub type Result<T> = std::result::Result<T, Error>;
