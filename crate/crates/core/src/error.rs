use std::io;

use thiserror::Error;

/// Errors produced by kernels, layer construction, checkpoints and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyper-parameters or incompatible dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// A tensor did not have the shape an operation requires.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A `key=value` config line could not be understood.
    #[error("config file line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
