use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("length mismatch: expected {expected}, got {got} ({what})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("no trajectory for entity {0}")]
    MissingTrajectory(u32),

    #[error("invalid scene spec: {0}")]
    Spec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("model not ready: {0}")]
    NotReady(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("fault: {0}")]
    Fault(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn fault(msg: impl Into<String>) -> Self {
        Error::Fault(msg.into())
    }
}
