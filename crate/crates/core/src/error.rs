use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric failure in {0}: non-finite value")]
    Numeric(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad user input rather than internal faults.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Argument(_)
                | Error::Config(_)
                | Error::Input(_)
                | Error::Insufficient(_)
                | Error::MissingArtifact(_)
                | Error::Io { .. }
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
