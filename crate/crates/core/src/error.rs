use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("rank deficient design: collinear columns [{}]", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("logistic fit failed: perfect separation on covariate '{0}'; use exact matching only")]
    Separation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. } | Error::Numerical(_) | Error::Separation(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
