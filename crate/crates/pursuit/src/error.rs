//! Crate-wide error type for fallible operations (I/O, config,
//! checkpoints, training aborts). Shape and precondition violations are
//! programming errors and panic instead.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Train(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
