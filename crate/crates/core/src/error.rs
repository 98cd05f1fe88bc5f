use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes (channel counts, parameter lengths, map sizes) disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// Spatial dimensions are out of bounds or not divisible by a factor.
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("degenerate component: {0}")]
    DegenerateComponent(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error: {message} (header bytes {header:02x?})")]
    Format { message: String, header: Vec<u8> },

    #[error("bad checkpoint magic {found:02x?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: u64, found: u64 },

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
