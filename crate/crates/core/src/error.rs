use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown wavelet family '{0}' (supported: haar, sym2, sym4, coif1, coif2)")]
    UnknownFamily(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("missing gradient for parameter '{0}'")]
    MissingGradient(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 usage/config error, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownFamily(_) => 1,
            Error::Numerical(_) | Error::MissingGradient(_) | Error::ShapeMismatch { .. } => 3,
            Error::IndexOutOfRange(_) | Error::Data(_) | Error::Format(_) | Error::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
