use std::io;

use thiserror::Error;

/// Errors produced by the dascodec library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("dtype mismatch: expected code {expected}, found {found}")]
    DtypeMismatch { expected: u8, found: u8 },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("model fingerprint mismatch: stream was produced by a different model")]
    FingerprintMismatch,

    #[error("non-finite {term} encountered at epoch {epoch}, step {step}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}
