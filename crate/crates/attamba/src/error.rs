use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] attamba_core::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    /// Training produced NaN/Inf.
    #[error("non-finite value at step {step}{} in `{op}`", layer.map(|l| format!(", layer {l}")).unwrap_or_default())]
    Diverged { step: usize, layer: Option<usize>, op: String },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
