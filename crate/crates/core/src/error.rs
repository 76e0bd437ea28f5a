use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid hyper-parameters, network layout or scale choices.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed input data: corrupt files, out-of-range labels.
    #[error("data error: {0}")]
    Data(String),
    /// An API was called in a state that does not allow it.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training produced a non-finite loss.
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
