use thiserror::Error;

/// Errors produced by the model, solvers and simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed arguments: dimension mismatches, out-of-range values.
    #[error("invalid input: {0}")]
    Input(String),

    /// No feasible production/transmission plan exists (or none was found).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Inconsistent model or scenario configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// The explicit scheme would not be monotone on the requested grid.
    #[error("stability condition violated: dt = {dt:.6e} exceeds the bound {bound:.6e}")]
    Stability { dt: f64, bound: f64 },

    /// The closed-form solution was requested outside its validity regime.
    #[error("closed form not applicable: {0}")]
    Regime(String),

    /// A post-run validation check failed.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
