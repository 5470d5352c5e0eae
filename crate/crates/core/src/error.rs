use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing prior: {0}")]
    MissingPrior(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad input data or files, as opposed to
    /// programming or usage errors.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::MissingPrior(_) | Error::NonFinite(_) | Error::Io { .. }
        )
    }
}
