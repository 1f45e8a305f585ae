use std::path::PathBuf;

/// Errors raised by the solver and the verification routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad parameters, insufficient
    /// quadrature exactness, budget exceeded, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Arguments of mismatched shape or grid.
    #[error("usage error: {0}")]
    Usage(String),
    /// Evaluation outside the domain of definition.
    #[error("domain error: {0}")]
    Domain(String),
    /// Numerical failure: eigensolver breakdown, blow-up, NaN.
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from the user's configuration rather than
    /// from a failed computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse(_) | Error::Usage(_) | Error::Domain(_)
        )
    }
}
