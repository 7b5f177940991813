use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    File { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of numeric origin (non-finite values, failed checks).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn file_error(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File { path: path.to_path_buf(), source }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
