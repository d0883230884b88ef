use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: invalid attribute: {msg}")]
    InvalidAttr { op: &'static str, msg: String },

    #[error("unknown primitive kind `{0}`")]
    UnknownPrimitive(String),

    #[error("tensor shape {shape:?} holds {expected} elements but {actual} values were given")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("tensor belongs to a different tape")]
    ForeignTensor,

    #[error("shape chain broken between {upstream} (output {output:?}) and {downstream}: {msg}")]
    ShapeChain {
        upstream: String,
        downstream: String,
        output: Vec<usize>,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("epoch {0} already recorded in ledger")]
    DuplicateEpoch(u64),

    #[error("ledgers describe different runs: {0}")]
    LedgerMismatch(String),

    #[error("parameter {0} not found")]
    UnknownParam(u32),

    #[error("scene config infeasible: {0}")]
    InfeasibleScene(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: malformed record: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
