use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("query time {t} outside [0, {tau}]")]
    TimeOutOfRange { t: f64, tau: f64 },
    #[error("rank-deficient regression: {0}")]
    RankDeficient(String),
    #[error("tape was recorded against different weights")]
    StaleTape,
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
