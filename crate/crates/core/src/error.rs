use thiserror::Error;

/// Errors raised by the numeric core and the experiment harness.
#[derive(Debug, Error)]
pub enum DsfError {
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op} failed to converge after {iterations} iterations (last iterate {last}, residual {residual:e})")]
    Convergence {
        op: &'static str,
        iterations: usize,
        last: f64,
        residual: f64,
    },

    #[error("degenerate mean direction: mean resultant length {r_bar:e} below floor")]
    DegenerateDirection { r_bar: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible dataset spec: {0}")]
    Infeasible(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("config error at `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DsfError {
    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        DsfError::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        DsfError::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// True for failures of a numerical nature (divergence, convergence, non-finite values).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DsfError::Convergence { .. }
                | DsfError::NonFinite(_)
                | DsfError::Diverged { .. }
                | DsfError::DegenerateDirection { .. }
        )
    }
}

pub type Result<T, E = DsfError> = std::result::Result<T, E>;
