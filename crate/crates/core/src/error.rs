use std::path::PathBuf;

use thiserror::Error;

use crate::tln::notation::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error: {0}")]
    Index(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("corrupt dataset {path}: expected {expected} bytes, found {actual}")]
    CorruptDataset {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("corrupt dataset: record {record} has label {label} but only {classes} classes exist")]
    LabelOverflow {
        record: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid archive: {0}")]
    Archive(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("non-finite embedding at t-SNE iteration {iteration}")]
    NonFiniteEmbedding { iteration: usize },

    #[error("perplexity search did not converge for row {row}")]
    Convergence { row: usize },

    #[error("unknown layer `{name}`; available: {}", available.join(", "))]
    UnknownLayer {
        name: String,
        available: Vec<String>,
    },

    #[error("sweep failed in cells: {}", cells.join("; "))]
    SweepFailed { cells: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op: op.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
