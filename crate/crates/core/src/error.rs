use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("identification failed: {0}")]
    Identification(String),
    #[error("bandwidth selection failed: {0}")]
    Bandwidth(String),
    #[error("solver failed: {0}")]
    Solve(String),
    #[error("quantile search failed: {0}")]
    Quantile(String),
    #[error("latent treatment unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
