use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("quadratic program is infeasible: {0}")]
    Infeasible(String),
    #[error("quadratic program did not converge after {iterations} iterations: {detail}")]
    IterationLimit { iterations: usize, detail: String },
    #[error("scenario rejection budget of {attempts} attempts exhausted for {kind}")]
    RejectionBudget { kind: String, attempts: usize },
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("model file corrupt at byte offset {offset}: {detail}")]
    CorruptModel { offset: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
