use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("state corruption: {0}")]
    State(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Failures while decoding a weight container.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic {0:?}, expected \"BVIT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file while reading {0}")]
    Truncated(String),
    #[error("unknown tensor name {0:?}")]
    UnknownTensor(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("embedded config is invalid: {0}")]
    BadConfig(String),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
