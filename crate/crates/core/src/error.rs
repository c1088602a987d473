use thiserror::Error;

#[derive(Debug, Error)]
pub enum EpiError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("self-loop on node {0}")]
    SelfLoop(usize),

    #[error("edge weight {0} outside [0, 1]")]
    BadWeight(f64),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("model variant {variant} requires `{field}`")]
    MissingRate { variant: &'static str, field: &'static str },

    #[error("state space of {states} states exceeds the cap of {cap}")]
    StateSpaceCap { states: usize, cap: usize },

    #[error("iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("no distribution has the requested marginals")]
    Infeasible,

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("operation not supported for variant {variant}: {reason}")]
    Unsupported { variant: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, EpiError>;
