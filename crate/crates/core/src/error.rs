use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: failed to parse {field}: {reason}")]
    Parse {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("metric {0} is undefined for this input")]
    UndefinedMetric(&'static str),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        reason: impl ToString,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            field: field.into(),
            reason: reason.to_string(),
        }
    }

    /// True for failures caused by the filesystem rather than by the input values.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
