use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("conductivity not admissible on triangle {triangle}: value {value}")]
    Admissibility { triangle: usize, value: f64 },

    #[error("stimulation pattern violates charge conservation (sum = {sum:e})")]
    ChargeConservation { sum: f64 },

    #[error("numerical failure: {message} (relative residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    #[error("matrix is not positive definite at pivot {pivot}")]
    NotPositiveDefinite { pivot: usize },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("parse error in {section} at line {line}: {message}")]
    Parse {
        line: usize,
        section: String,
        message: String,
    },

    #[error("degenerate trace: {0}")]
    DegenerateTrace(String),

    #[error("empty accumulator: no states recorded past burn-in")]
    EmptyAccumulator,

    #[error("stale manifest in {dir}: expected config hash {expected}, found {found}")]
    StaleManifest {
        dir: PathBuf,
        expected: String,
        found: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the command-line front end: 2 for
    /// configuration and input problems, 3 for numerical failures, 4 for a
    /// stale manifest.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Geometry(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json(_) => 2,
            Error::Admissibility { .. }
            | Error::ChargeConservation { .. }
            | Error::Numerical { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::DegenerateTrace(_)
            | Error::EmptyAccumulator => 3,
            Error::StaleManifest { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
