use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bit width {0} out of range 1..=8")]
    BitsOutOfRange(usize),

    #[error("bad magic bytes {0:?}, expected \"BCQ1\"")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    VersionMismatch(u32),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("container bounds violation: {0}")]
    Bounds(String),

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("plan does not cover {0}")]
    Coverage(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Metadata(e.to_string())
    }
}
