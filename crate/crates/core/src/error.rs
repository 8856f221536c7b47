use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Split(_) => "split",
            Error::Load(_) => "load",
            Error::Internal(_) => "internal",
            Error::Io { .. } => "io",
        }
    }

    /// The message without the category prefix.
    pub fn detail(&self) -> String {
        match self {
            Error::Dimension(m)
            | Error::Numeric(m)
            | Error::Usage(m)
            | Error::Config(m)
            | Error::Validation(m)
            | Error::Split(m)
            | Error::Load(m)
            | Error::Internal(m) => m.clone(),
            Error::Io { path, source } => format!("{}: {source}", path.display()),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
