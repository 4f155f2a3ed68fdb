use std::path::PathBuf;

use thiserror::Error;

use crate::data::npy::NpyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("batch of {0} examples is too small for batch statistics (need at least 2)")]
    BatchTooSmall(usize),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("perplexity calibration failed for row {row}: {reason}")]
    Calibration { row: usize, reason: String },

    #[error("degenerate affinity row {0}: every distance is infinite")]
    DegenerateRow(usize),

    #[error("too few points for tSNE: {0} (need at least 5)")]
    TooFewPoints(usize),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: u64, reason: String },

    #[error("unsupported embedding dimension {0} (scatter plots need 2)")]
    UnsupportedDimension(usize),

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage '{stage}' needs upstream artifact {}", path.display())]
    StageDependency { stage: &'static str, path: PathBuf },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Npy(#[from] NpyError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Whether the failure came from the numerics rather than inputs or files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Calibration { .. }
                | Error::DegenerateRow(_)
                | Error::Diverged { .. }
        )
    }
}
