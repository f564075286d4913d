use thiserror::Error;

pub type Result<T> = std::result::Result<T, FincastError>;

#[derive(Debug, Error)]
pub enum FincastError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frequency index {index} out of range for embedding table with {rows} rows")]
    FreqIndexOutOfRange { index: usize, rows: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Weights(#[from] WeightFileError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Failures while reading or writing a weight file. Each variant maps to a
/// distinct exit code in the CLI.
#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("empty path")]
    EmptyPath,
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("config digest mismatch: file {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("parameter {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed manifest: {0}")]
    Malformed(String),
}

impl WeightFileError {
    pub fn code(&self) -> i32 {
        match self {
            WeightFileError::EmptyPath => 10,
            WeightFileError::BadMagic(_) => 11,
            WeightFileError::UnsupportedVersion(_) => 12,
            WeightFileError::Truncated(_) => 13,
            WeightFileError::DigestMismatch { .. } => 14,
            WeightFileError::ChecksumMismatch => 15,
            WeightFileError::ShapeMismatch { .. } => 16,
            WeightFileError::Malformed(_) => 17,
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(FincastError::InvalidArgument(msg.into()))
}
