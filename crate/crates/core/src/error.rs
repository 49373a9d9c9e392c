use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; `axes` names the offending dimensions.
    #[error("dimension mismatch in {op}: {axes}")]
    Dimension { op: &'static str, axes: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Training { step: usize, loss: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("point projects behind the camera (z' = {depth})")]
    BehindCamera { depth: f64 },

    #[error("cannot ingest {}{}: {reason}", path.display(), offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Ingest {
        path: PathBuf,
        offset: Option<u64>,
        reason: String,
    },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Broad error category, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Input,
    Numeric,
    Io,
    Usage,
}

impl Error {
    pub(crate) fn dim(op: &'static str, axes: impl Into<String>) -> Self {
        Error::Dimension { op, axes: axes.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, offset: Option<u64>, reason: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Parameter(_) => ErrorCategory::Config,
            Error::Dimension { .. } | Error::Input(_) | Error::Ingest { .. } | Error::Evaluation(_) => {
                ErrorCategory::Input
            }
            Error::Training { .. } | Error::Numeric(_) | Error::BehindCamera { .. } => ErrorCategory::Numeric,
            Error::Io { .. } => ErrorCategory::Io,
            Error::Usage(_) => ErrorCategory::Usage,
            Error::Frame { source, .. } => source.category(),
        }
    }
}
