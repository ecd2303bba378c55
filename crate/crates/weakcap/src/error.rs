//! Crate-wide error type.
//!
//! One enum covers every stage; variants map onto the CLI exit codes
//! (`Divergence` exits 3, everything else that reaches the top level exits 2,
//! argument parsing itself exits 1).

use thiserror::Error;

/// All failures the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Corpus, embedding, feature, or annotation input could not be read or
    /// decoded.
    #[error("ingest: {0}")]
    Ingest(String),

    /// Vocabulary construction failed (e.g. empty corpus).
    #[error("vocabulary: {0}")]
    Vocab(String),

    /// Tensor or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A function argument is structurally invalid.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Training could not proceed (empty batch, unresolvable triplets, ...).
    #[error("training: {0}")]
    Train(String),

    /// A loss became non-finite.
    #[error("divergence at {context}: loss {loss}")]
    Divergence { context: String, loss: f64 },

    /// Metric evaluation failed (id mismatch, empty candidate set, ...).
    #[error("evaluation: {0}")]
    Eval(String),

    /// Run configuration is missing, malformed, or out of range.
    #[error("config: {0}")]
    Config(String),

    /// A binary artifact (checkpoint, feature map) is malformed.
    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
