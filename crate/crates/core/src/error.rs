use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// The variants are coarse on purpose: the CLI maps them onto exit codes
/// (validation/config failures vs. bad input data).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("capacity error: {needed} instances do not fit in {available} queries")]
    Capacity { needed: usize, available: usize },
    #[error("nothing to order: {0} instance(s) selected, at least 2 required")]
    NothingToOrder(usize),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
