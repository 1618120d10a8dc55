use std::path::PathBuf;

use gsimclr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{origin}: format error: {message}")]
    Format { origin: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite value; `history` holds the finite
    /// losses recorded before the failure.
    #[error("{stage} diverged at epoch {epoch}: {cause}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        cause: String,
        history: Vec<f64>,
    },

    #[error("invalid batch plan: {0}")]
    InvalidPlan(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing artifact {}; run `{producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
