use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("alpha = 1 is not supported (tan(pi*alpha/2) has a pole there)")]
    AlphaOne,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("parameter vector outside the admissible set: {0}")]
    InvalidTheta(String),

    #[error("inversion cutoff not found: characteristic function still above {threshold:e} at frequency {limit:e}")]
    CutoffNotFound { limit: f64, threshold: f64 },

    #[error("density grid ringing: minimum value {min:e} is below the clipping tolerance")]
    Ringing { min: f64 },

    #[error("quadrature did not converge: estimate {estimate:e}, achieved error {error:e}")]
    Quadrature { estimate: f64, error: f64 },

    #[error("non-finite Jacobian entry at row {row}, column {col}")]
    NonFiniteJacobian { row: usize, col: usize },

    #[error("singular matrix (condition estimate {condition:e}): {context}")]
    Singular { condition: f64, context: String },

    #[error("target not identified: {0}")]
    NotIdentified(String),

    #[error("insufficient exceedances: {count} increments above threshold {threshold:e}")]
    InsufficientExceedances { count: usize, threshold: f64 },

    #[error("moment function does not satisfy the hypotheses of this case: {0}")]
    Hypothesis(String),

    #[error("Fisher grid under-resolved: J integrals moved by {change:e} on refinement")]
    Underresolved { change: f64 },

    #[error("experiment aborted: {0}")]
    Aborted(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
