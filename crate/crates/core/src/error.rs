use thiserror::Error;

/// Errors produced by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("operation not supported for this bath: {0}")]
    Unsupported(&'static str),

    #[error("quadrature did not reach relative tolerance {tol:e} after {intervals} intervals (estimate {estimate:e}, error {error:e})")]
    Quadrature {
        tol: f64,
        intervals: usize,
        estimate: f64,
        error: f64,
    },

    #[error("kernel quadrature failed at tau = {tau}: {source}")]
    KernelPoint {
        tau: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("Hilbert space dimension {dim} exceeds budget {budget}")]
    DimensionBudget { dim: usize, budget: usize },

    #[error("overlap matrix is singular beyond regularization")]
    SingularOverlap,

    #[error("series has {len} entries, need at least {min}")]
    SeriesTooShort { len: usize, min: usize },

    #[error("second moment of the series vanishes")]
    ZeroSecondMoment,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("chain {chain} at sweep {sweep}: {source}")]
    Chain {
        chain: u64,
        sweep: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("no bracketing crossing in the scanned grid")]
    NoBracket,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
