use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs are structurally inconsistent (shape/size/measure mismatch).
    #[error("structural error: {0}")]
    Structural(String),

    /// A coefficient evaluation produced a non-finite value.
    #[error("evaluation error: {what} at input {input}")]
    Evaluation { what: String, input: String },

    /// A simulated state became non-finite.
    #[error("divergence at step {step}, particle {particle}: {what}")]
    Divergence {
        step: usize,
        particle: usize,
        what: String,
    },

    /// Least-squares fit failed; typically a rank-deficient design matrix.
    #[error("regression error: {0}; try a larger ridge weight or a lower degree")]
    Regression(String),

    /// A requested derivative evaluator is not available for these coefficients.
    #[error("capability error: {0}")]
    Capability(String),

    /// Picard iteration reached maxIter with persistently non-contracting ratios.
    #[error(
        "non-contraction: ratio {ratio:.4} >= 1 after {iterations} iterations; \
         the fixed point is only guaranteed for a small horizon, try a smaller T"
    )]
    NonContraction { ratio: f64, iterations: usize },

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }
}
