use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is singular (|det| below {threshold:e})")]
    SingularMatrix { threshold: f64 },

    #[error("actnorm init: channel {channel} has zero variance")]
    DegenerateChannel { channel: usize },

    #[error("actnorm layer is not initialized")]
    Uninitialized,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("latent bundle is stale: produced at parameter version {bundle}, model is at {model}")]
    StaleBundle { bundle: u64, model: u64 },

    #[error("allocation budget of {budget} bytes exceeded")]
    OutOfBudget { budget: u64 },

    #[error("training diverged at iteration {iter}: {what}")]
    Diverged { iter: usize, what: String },

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }
}
