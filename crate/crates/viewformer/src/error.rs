use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] viewformer_core::error::Error),
}

impl Error {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Error {
        Error::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Stable short name used in the CLI's error line.
    pub fn kind(&self) -> &'static str {
        use viewformer_core::error::Error as C;
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) | Error::Core(C::Config(_)) => "config",
            Error::Core(C::Shape { .. }) => "shape",
            Error::Core(C::Validation(_)) => "validation",
            Error::Core(C::NonFinite(_)) => "non_finite",
            Error::Core(C::Estimation(_)) => "estimation",
        }
    }
}
