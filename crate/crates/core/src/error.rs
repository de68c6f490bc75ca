use std::path::PathBuf;

use crate::model::FitTrace;

pub type Result<T> = std::result::Result<T, HmfError>;

#[derive(Debug, thiserror::Error)]
pub enum HmfError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: String,
        found: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular system in {0}")]
    Singular(String),

    /// A gradient or iterate stopped being finite. `iteration` is `None` when
    /// the failing call was made outside of a fit loop.
    #[error("non-finite gradient{}", .iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite { iteration: Option<usize> },

    /// The objective blew up during `fit`; the records collected so far are kept.
    #[error("divergence at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        trace: Box<FitTrace>,
    },

    #[error("invalid input: {}", .0.join("; "))]
    Invalid(Vec<String>),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HmfError {
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        HmfError::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HmfError::Io {
            path: path.into(),
            source,
        }
    }
}
