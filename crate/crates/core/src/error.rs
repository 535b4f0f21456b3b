use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid candidate key {key} (rank {rank}): {reason}")]
    InvalidCandidate {
        key: u64,
        rank: usize,
        reason: &'static str,
    },

    #[error("duplicate key {0}")]
    DuplicateKey(u64),

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("oracle refused: {0}")]
    OracleLimit(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
