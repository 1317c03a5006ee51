use std::fmt;

/// Library-wide error type.
///
/// The variants map onto the CLI exit-code classes: `Shape`, `Data` and
/// `Config` are usage/configuration problems, `Io` and `Format` are
/// file-level problems, and numeric check failures are reported by the
/// callers that detect them.
#[derive(Debug)]
pub enum Error {
    /// Tensor dimension mismatch or an operation spec that yields an
    /// invalid output size.
    Shape(String),
    /// Invalid data contents: labels out of range, empty valid masks,
    /// non-positive depth on a valid pixel.
    Data(String),
    /// Invalid configuration values.
    Config(String),
    /// Malformed binary container; `offset` is the byte position at which
    /// decoding failed.
    Format { offset: u64, message: String },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { crate::error::Error::Data(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { crate::error::Error::Config(format!($($arg)*)) };
}

pub(crate) use {config_err, data_err, shape_err};
