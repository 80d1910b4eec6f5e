use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: expected {expected} features, found {found}")]
    FeatureCount {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: negative or non-finite timestamp {value}")]
    BadTimestamp { line: usize, value: String },

    #[error("line {line}: state label must be 0 or 1, got {value:?}")]
    BadLabel { line: usize, value: String },

    #[error("{0} split is empty")]
    EmptySplit(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("id {id} out of range for {what} (limit {limit})")]
    IdOutOfRange {
        what: &'static str,
        id: usize,
        limit: usize,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}, interaction {seq_index}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        seq_index: usize,
    },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
