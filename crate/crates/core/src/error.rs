use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Weights(#[from] WeightFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

/// Failures specific to the binary weight format.
#[derive(Debug, Error, PartialEq)]
pub enum WeightFileError {
    #[error("file too short to hold a checksum")]
    Truncated,
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("unknown record {0:?}")]
    UnknownRecord(String),
    #[error("missing record {0:?}")]
    MissingRecord(String),
    #[error("duplicate record {0:?}")]
    DuplicateRecord(String),
    #[error("record {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}
