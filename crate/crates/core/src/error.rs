use thiserror::Error;

#[derive(Debug, Error)]
pub enum MocoError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A non-uniform frequency fell outside the representable band.
    #[error("band limit exceeded at {location}: normalized frequency {value:.6} outside [-pi, pi]")]
    BandLimit { location: String, value: f64 },

    #[error("projection did not reach feasibility after {iterations} iterations (relative violation {violation:.3e}, gap {gap:.3e})")]
    Convergence {
        iterations: usize,
        violation: f64,
        gap: f64,
    },

    #[error("solver diverged: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, MocoError>;

pub(crate) fn invalid_param(msg: impl Into<String>) -> MocoError {
    MocoError::InvalidParameter(msg.into())
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> MocoError {
    MocoError::InvalidInput(msg.into())
}
