use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("no worker grid with {requested} workers keeps every sub-domain edge >= 2L (max feasible: {max_feasible})")]
    InfeasibleGrid { requested: usize, max_feasible: usize },

    #[error("worker {worker} diverged: |Z| = {value:.3e} exceeds {threshold:.3e}")]
    Diverged {
        worker: usize,
        value: f64,
        threshold: f64,
    },

    #[error("protocol violation on worker {worker}: {reason}")]
    Protocol { worker: usize, reason: String },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
