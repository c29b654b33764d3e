use std::path::PathBuf;

use crate::params::ParameterVector;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}, iteration {iteration}")]
    Diverged {
        epoch: usize,
        iteration: u64,
        /// Last parameters for which every gradient was finite.
        last_finite: Box<ParameterVector>,
    },

    #[error("degenerate {0}")]
    Degenerate(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("batch index {index} lies outside the {split} split")]
    SplitLeak { index: usize, split: &'static str },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// True for errors caused by a bad configuration or incompatible inputs
    /// rather than by numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownArchitecture(_)
                | Error::Shape(_)
                | Error::Layout(_)
                | Error::Json(_)
                | Error::Format { .. }
        )
    }
}
