//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes of the
/// library: shape conformance, configuration validation, vocabulary lookups,
/// numerical health, internal invariants, file parsing, and evaluation.
#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Token index outside the vocabulary.
    #[error("vocabulary error: token index {index} out of range (vocab size {vocab_size})")]
    Vocab { index: usize, vocab_size: usize },

    /// Non-finite value or other numerical failure.
    #[error("numerics error: {0}")]
    Numerics(String),

    /// An internal invariant was violated.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Evaluation protocol violation (e.g. target missing from the gallery).
    #[error("eval error: {0}")]
    Eval(String),

    /// Path churn is undefined because the two epochs share no queries.
    #[error("path churn undefined: no shared queries between epochs")]
    ChurnUndefined,

    /// Checkpoint file is unreadable, corrupt, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
