use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid {element}: {message}")]
    Validation { element: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("power flow did not converge after {iterations} iterations (max mismatch {mismatch:.3e})")]
    Divergence { iterations: usize, mismatch: f64 },

    #[error("unobservable states: {}", .states.join(", "))]
    Unobservable { states: Vec<String> },

    #[error("regression Gram matrix is singular (condition {condition:.3e}); collect more samples or use ridge > 0")]
    Singular { condition: f64 },

    #[error("inferred branch graph is disconnected ({components} components); lower the pruning threshold")]
    Disconnected { components: usize },

    #[error("identification diverged; mismatch history {history:?}")]
    IdentificationDiverged { history: Vec<f64> },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(element: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            element: element.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures caused by bad input rather than numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. } | Error::Validation { .. } | Error::Dimension { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
