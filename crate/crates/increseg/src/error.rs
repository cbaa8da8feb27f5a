//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a structural check (shape mismatch, bad range, non-finite value).
    #[error("validation: {0}")]
    Validation(String),

    /// An index (task, class, label) was outside its permitted range.
    #[error("range: {0}")]
    Range(String),

    /// A foundation-oracle call failed for a specific sample.
    #[error("oracle failure on sample '{sample_id}': {detail}")]
    Oracle { sample_id: String, detail: String },

    /// Training produced a non-finite loss; names the offending term.
    #[error("non-finite loss in term '{term}' at epoch {epoch}, sample '{sample_id}'")]
    NonFiniteLoss {
        term: String,
        epoch: usize,
        sample_id: String,
    },

    /// A command needs an artifact produced by an earlier command.
    #[error("missing artifact: {what} (run `{hint}` first)")]
    MissingArtifact { what: String, hint: String },

    /// A metric is undefined on the given inputs (e.g. every class has zero union).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Configuration file rejected.
    #[error("config: {0}")]
    Config(String),

    /// A task-t sample access outside the task's permitted split.
    #[error("data isolation violation: sample '{sample_id}' is not in the active split")]
    IsolationViolation { sample_id: String },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
