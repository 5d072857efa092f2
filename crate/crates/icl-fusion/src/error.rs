//! Crate-wide error type.
//!
//! One enum covers all modules; the CLI maps variants onto its exit codes
//! (config 2, capacity 3, corruption 4).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible (matmul inner dims, concat widths, ...).
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A token or row index is out of range.
    #[error("index out of range in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    /// An operation produced a NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A sequence does not fit the model's context window.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Configuration is invalid or inconsistent with an artifact on disk.
    #[error("config error: {0}")]
    Config(String),

    /// A persisted artifact failed its integrity checks.
    #[error("corrupt file: {0}")]
    Corruption(String),

    /// Inconsistent versions mixed in one operation (e.g. fused tokens from
    /// different weights in one sequence).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// API misuse (loss not on tape, empty layer range, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A batch item failed; carries the item index.
    #[error("batch item {index}: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// A training instance must be skipped (capacity overflow after
    /// truncation was impossible).
    #[error("instance skipped: {0}")]
    SkipInstance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 0 success, 2 config, 3 capacity,
    /// 4 corruption, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Capacity(_) => 3,
            Error::Corruption(_) => 4,
            Error::BatchItem { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
