//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({detail})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: String, value: f64 },

    #[error("non-finite value in {context}")]
    NotFinite { context: String },

    #[error("model has no market-price-of-risk network but a historical-measure operation was requested")]
    MissingZeta,

    #[error("simulation produced a non-finite state at step {step}")]
    SimulationDiverged { step: usize },

    #[error("maturity {t} does not lie on the simulation grid (nearest grid point {nearest})")]
    MaturityOffGrid { t: f64, nearest: f64 },

    #[error("quote {index} has zero bid-ask spread; spread weights are undefined")]
    ZeroSpread { index: usize },

    #[error("{what} is empty")]
    Empty { what: String },

    #[error("burn-in {burn_in} leaves no draws (chain length {len})")]
    BurnInTooLarge { burn_in: usize, len: usize },

    #[error("correlation must satisfy |rho| < 1 for this operation, got {rho}")]
    DegenerateCorrelation { rho: f64 },

    #[error("implied volatility: price {price} violates the {bound} bound {limit}")]
    ArbitrageBound {
        price: f64,
        bound: &'static str,
        limit: f64,
    },

    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence {
        what: String,
        iterations: usize,
    },

    #[error("covariance matrix is not positive definite even with jitter {jitter}; check the parameters (a must lie in (-0.5, 0) and the grid must be strictly increasing)")]
    CholeskyFailed { jitter: f64 },

    #[error("{what} overflows f64; reduce the horizon, the Lipschitz constants or the tolerance")]
    BoundOverflow { what: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("csv parse error at line {line}: {detail}")]
    Csv { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Classifies errors for the CLI exit code convention: configuration and input
    /// errors exit with 2, runtime failures with 1.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Toml(_) | Error::Csv { .. }
        )
    }
}
