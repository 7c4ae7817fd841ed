use thiserror::Error;

#[derive(Debug, Error)]
pub enum RpuError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in input to {0}")]
    NonFinite(&'static str),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("{0}")]
    State(&'static str),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = RpuError> = std::result::Result<T, E>;

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl std::fmt::Debug,
    got: impl std::fmt::Debug,
) -> RpuError {
    RpuError::Shape {
        context,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> RpuError {
    RpuError::Config(msg.into())
}
