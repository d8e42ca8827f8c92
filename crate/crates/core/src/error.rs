use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("cfg line {line}: {msg}")]
    Cfg { line: usize, msg: String },

    #[error("weights file truncated: needed {needed} more bytes at offset {offset}")]
    WeightsTruncated { offset: usize, needed: usize },

    #[error("weights file has {0} trailing bytes")]
    WeightsTrailing(usize),

    #[error("unsupported weights version {major}.{minor}.{revision}")]
    WeightsVersion { major: i32, minor: i32, revision: i32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric fault in {where_}: {msg}")]
    NumericFault { where_: String, msg: String },

    #[error("label line {line}: {msg}")]
    Label { line: usize, msg: String },

    #[error("index row {row}: {msg}")]
    Index { row: usize, msg: String },

    #[error("netpbm: {0}")]
    Netpbm(String),

    #[error("detections line {line}: {msg}")]
    Detections { line: usize, msg: String },

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(where_: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::NumericFault {
            where_: where_.into(),
            msg: msg.into(),
        }
    }

    /// True for non-finite values encountered during computation, as
    /// opposed to malformed inputs.
    pub fn is_numeric_fault(&self) -> bool {
        matches!(self, Error::NumericFault { .. })
    }
}
