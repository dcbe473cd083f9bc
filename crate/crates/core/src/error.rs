use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integration blew up at t={time:.4}s (non-finite state)")]
    IntegrationBlowup { time: f64 },

    #[error("gaussian process fit failed: {0}")]
    FitFailure(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// Training produced a non-finite loss. `batch` holds the perceived states
    /// of the offending minibatch serialized as JSON.
    #[error("training diverged at epoch {epoch}, step {step}")]
    TrainingDiverged {
        epoch: usize,
        step: usize,
        batch: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn ensure_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(contract(format!(
            "{what}: expected dimension {expected}, got {got}"
        )));
    }
    Ok(())
}
