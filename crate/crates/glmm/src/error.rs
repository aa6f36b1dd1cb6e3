//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by graph construction, solvers, model fitting and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix fails Laplacian validity checks: {0}")]
    InvalidLaplacian(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("graph solver failed{}: {message}", cluster.map(|k| format!(" for cluster {k}")).unwrap_or_default())]
    Solver {
        cluster: Option<usize>,
        message: String,
    },

    #[error("all {attempted} restarts failed; last error: {last_error}")]
    AllRestartsFailed {
        attempted: usize,
        last_error: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Attach a cluster index to a solver error bubbling out of an M-step.
    pub(crate) fn for_cluster(self, k: usize) -> Self {
        match self {
            Error::Solver { message, .. } => Error::Solver {
                cluster: Some(k),
                message,
            },
            other => Error::Solver {
                cluster: Some(k),
                message: other.to_string(),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
