use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("action {action} is masked in the current state")]
    MaskedAction { action: usize },
    #[error("budget exhausted")]
    BudgetExhausted,
    #[error("instance too large for exact solve: {chance_bits} chance bits exceed cap {cap}")]
    Intractable { chance_bits: usize, cap: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed instance file: {0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
