use thiserror::Error;

#[derive(Debug, Error)]
pub enum VppError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("simulation diverged at step {step}: {detail}")]
    SimulationDiverged { step: usize, detail: String },

    #[error("optimizer diverged at iteration {iteration}: {detail}")]
    OptimizerDiverged { iteration: usize, detail: String },

    #[error("refiner unavailable ({context}): {detail}")]
    RefinerUnavailable { context: String, detail: String },

    #[error("loop closure degenerate: {0}")]
    ClosureDegenerate(String),

    #[error("scenario error at {path}: {detail}")]
    Scenario { path: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VppError>;

impl VppError {
    pub fn invalid(msg: impl Into<String>) -> VppError {
        VppError::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> VppError {
        VppError::Config(msg.into())
    }
}
