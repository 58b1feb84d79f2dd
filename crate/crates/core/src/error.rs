use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes or an invalid axis.
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: id {id} out of range for size {size}")]
    Index { id: usize, size: usize },

    /// A caller broke an API precondition (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
