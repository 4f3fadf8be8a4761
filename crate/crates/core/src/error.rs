use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two included levels latch on the same clock edge.
    #[error("capacitor too small: levels {fast_level} and {slow_level} both latch at cycle {cycle}")]
    CapacitorTooSmall {
        fast_level: u32,
        slow_level: u32,
        cycle: u64,
    },

    #[error("shape mismatch at layer {layer}: {message}")]
    ShapeMismatch { layer: usize, message: String },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
