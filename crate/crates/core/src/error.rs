use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index ({i}, {j}, {k}) outside tensor dims {dims:?}")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        k: usize,
        dims: [usize; 3],
    },

    #[error("duplicate entry at ({i}, {j}, {k})")]
    DuplicateIndex { i: usize, j: usize, k: usize },

    #[error("tensor has no known entries")]
    EmptyTensor,

    #[error("tensor dims must be positive, got {0:?}")]
    InvalidDims([usize; 3]),

    #[error("non-finite value {value} at ({i}, {j}, {k})")]
    NonFiniteValue { i: usize, j: usize, k: usize, value: f64 },

    #[error("all values equal {0}; linear scaling is undefined")]
    DegenerateRange(f64),

    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    RatioSum([f64; 3]),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite update in {matrix} row {row} column {col}")]
    NonFiniteUpdate {
        matrix: &'static str,
        row: usize,
        col: usize,
    },

    #[error("evaluation set is empty")]
    EmptySet,

    #[error("ablation needs a nonzero integral or derivative gain")]
    NothingToAblate,

    #[error("training diverged after {epochs} epoch(s): {reason}")]
    DivergenceDetected { epochs: usize, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: negative value {value}")]
    NegativeValue { line: usize, value: f64 },

    #[error("column `{0}` not found in header")]
    UnknownColumn(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
