use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LqacError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("(A, B) is not stabilizable")]
    NotStabilizable,

    #[error(
        "Riccati iteration did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    NoConvergence { residual: f64, iterations: usize },

    #[error("matrix is not stable: spectral radius {0:.6} >= 1")]
    NotStable(f64),

    #[error("closed loop A + BK is rank deficient")]
    SingularClosedLoop,

    #[error("K0 does not stabilize the system: spectral radius of A + B K0 is {0:.6}")]
    UnstableK0(f64),

    #[error("Gram matrix is singular")]
    SingularGram,

    #[error("K-region weight matrix is numerically singular")]
    SingularWeight,

    #[error("requested horizon {requested} exceeds recorded horizon {recorded}")]
    HorizonExceeded { requested: usize, recorded: usize },

    #[error("argument out of domain: {0}")]
    DomainError(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("need at least {needed} points in the fit window, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LqacError {
    fn from(e: std::io::Error) -> Self {
        LqacError::Io(e.to_string())
    }
}

impl From<csv::Error> for LqacError {
    fn from(e: csv::Error) -> Self {
        LqacError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for LqacError {
    fn from(e: serde_json::Error) -> Self {
        LqacError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LqacError>;
