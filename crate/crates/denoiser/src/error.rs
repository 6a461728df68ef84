use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Core(#[from] cfdiff::Error),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("parameter structure mismatch: {0}")]
    Structure(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<Error> for cfdiff::Error {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(inner) => inner,
            other => cfdiff::Error::Model(other.to_string()),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
