//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had the wrong dimension for the requested operation.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A configuration value violates its documented invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An operation that needs at least one row was given none.
    #[error("empty dataset")]
    EmptyDataset,

    /// A sampling request exceeded the available rows of a class.
    #[error("class {class} has {available} rows, requested {requested}")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },

    /// Training produced a non-finite loss and was aborted.
    #[error("non-finite loss ({value}) at epoch {epoch}, row {row}")]
    NonFiniteLoss { epoch: usize, row: usize, value: f64 },

    /// Rejection sampling did not find an admissible instance in time.
    #[error("rejection sampling failed after {attempts} attempts: {context}")]
    RejectionFailed { context: &'static str, attempts: usize },

    /// CSV schema did not match the file header.
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    /// Underlying CSV reader/writer error.
    #[error(transparent)]
    Csv(#[from] csv::Error),

    /// Underlying I/O error.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
