use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not satisfy an operator's contract.
    Dimension(String),
    /// A NaN or infinity appeared in a forward value or a gradient.
    Numeric(String),
    /// A configuration value is out of its documented range.
    Config(String),
    /// An annotation violates its invariants.
    Validation(String),
    /// Synthetic scene generation gave up.
    Generation(String),
    /// The image is too small to crop.
    Augmentation(String),
    /// A function was called outside its domain (e.g. metrics of nothing).
    Domain(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Generation(m) => write!(f, "generation error: {m}"),
            Error::Augmentation(m) => write!(f, "augmentation error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(alloc::format!($($arg)*))
    };
}
pub(crate) use dim_err;
