use thiserror::Error;

/// Errors raised while decoding a `C2TF` tensor file.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"C2TF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}, expected 1")]
    BadVersion(u8),
    #[error("rank {0} out of range 1..=4")]
    BadRank(u8),
    #[error("reserved header bytes must be zero")]
    BadReserved,
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("zero extent in dims {0:?}")]
    ZeroExtent(Vec<usize>),
}

impl FormatError {
    /// Stable numeric code per failure kind, shared with the C interface.
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic(_) => 1,
            FormatError::BadVersion(_) => 2,
            FormatError::BadRank(_) => 3,
            FormatError::Truncated { .. } => 4,
            FormatError::TrailingBytes { .. } => 5,
            FormatError::BadReserved => 6,
            FormatError::ZeroExtent(_) => 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported kernel size {0}x{1} (expected 1x1 or 3x3)")]
    KernelSize(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("tensor file: {0}")]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
