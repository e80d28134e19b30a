use std::path::PathBuf;

/// Errors produced by the reconstruction toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Dimension {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("training diverged in block {block} at epoch {epoch}: {detail}")]
    Diverged {
        block: usize,
        epoch: usize,
        detail: String,
    },

    #[error("missing {what}: {path}")]
    Missing { what: String, path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("png encoding failed: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
