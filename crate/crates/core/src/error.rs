use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the analysis library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The dataset file failed schema or consistency checks.
    #[error("dataset error at {location}: {message}")]
    Dataset { location: String, message: String },

    #[error("duplicate question id `{0}`")]
    DuplicateQuestion(String),

    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),

    /// A statistic was requested for a cell with no data.
    #[error("undefined: {0}")]
    Undefined(String),

    /// Theta grids of two curves did not line up.
    #[error("theta grid mismatch; missing thetas: {missing:?}")]
    GridMismatch { missing: Vec<f64> },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// A cartesian point fell outside the reference triangle.
    #[error("point ({x}, {y}) lies outside the simplex triangle; signed edge distances {distances:?}")]
    OutsideTriangle { x: f64, y: f64, distances: [f64; 3] },

    #[error("manifest mismatch: expected {expected}, found {found}")]
    ManifestMismatch { expected: String, found: String },

    /// Trial log and plan disagree.
    #[error("log/plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("incomplete log: {missing} of {total} planned trials missing (pass allow_partial to analyze anyway)")]
    PartialLog { missing: usize, total: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
