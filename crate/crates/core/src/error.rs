use std::path::PathBuf;

use crate::grid::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions {height}x{width}: both must be at least 1")]
    InvalidDimensions { height: usize, width: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid value: {0}")]
    Invalid(Violation),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("absolute sum of the affinity vector is zero")]
    ZeroAffinity,

    #[error("empty pixel set: {0}")]
    EmptySet(&'static str),

    #[error("non-positive ground truth depth {value} at ({row}, {col})")]
    NonPositiveDepth { row: usize, col: usize, value: f64 },

    #[error("loss diverged at iteration {iteration}: {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures decoding or encoding the on-disk map formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"NLFM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("declared dimensions {height}x{width}x{channels} overflow or are zero")]
    DimOverflow {
        height: u32,
        width: u32,
        channels: u32,
    },
    #[error("depth {value} at ({row}, {col}) is outside the 16-bit PNG range")]
    DepthOutOfRange { row: usize, col: usize, value: f64 },
    #[error("png: {0}")]
    Png(String),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
