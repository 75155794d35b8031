use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] rrp_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed binary file: wrong magic, unsupported version, truncation.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// 1 for invalid input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use rrp_core::Error as C;
        match self {
            Error::Config(_) | Error::Format { .. } | Error::Parse { .. } => 1,
            Error::Core(C::Config(_) | C::Validation(_) | C::Dimension(_) | C::Domain(_)) => 1,
            Error::Core(_) | Error::Io { .. } => 2,
        }
    }
}
