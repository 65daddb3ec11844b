use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    Shape(String),
    /// A spatial-normalization channel summed to zero or below.
    DegenerateNormalization { channel: usize, sum: f64 },
    /// An operation contract was violated (non-scalar objective, step size
    /// out of range, ...).
    Contract(String),
    /// Invalid configuration value.
    Config(String),
    /// Missing or malformed data (files, manifests, label ranges).
    Data(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(reason) => write!(f, "shape mismatch: {reason}"),
            Error::DegenerateNormalization { channel, sum } => write!(
                f,
                "degenerate normalization: channel {channel} sums to {sum} (must be > 0)"
            ),
            Error::Contract(reason) => write!(f, "contract violation: {reason}"),
            Error::Config(reason) => write!(f, "invalid config: {reason}"),
            Error::Data(reason) => write!(f, "data error: {reason}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
