use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("generation failed: output disconnected after {attempts} attempts (master seed {seed})")]
    GenerationFailed { seed: u64, attempts: usize },

    #[error("graph is disconnected")]
    Disconnected,

    #[error("matrix is not positive definite on the deflated subspace")]
    NotPositiveDefinite,

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("operator is zero")]
    ZeroOperator,

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("degenerate probe: quadratic form {0:e} below threshold")]
    DegenerateProbe(f64),

    #[error("certificate failed: {0}")]
    Certificate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::InvalidInput(_) => 2,
            Error::GenerationFailed { .. } => 3,
            Error::Certificate(_) => 4,
            Error::Diverged { .. } => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
