use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index ({i}, {j}, {k}) out of range for tensor of dims {dims:?}")]
    OutOfRange {
        i: usize,
        j: usize,
        k: usize,
        dims: (usize, usize, usize),
    },

    #[error("invalid mode {0}, expected 1, 2 or 3")]
    InvalidMode(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("slice {slice} is not symmetric: max asymmetry {asymmetry:e} exceeds {tol:e}")]
    Asymmetric { slice: usize, asymmetry: f64, tol: f64 },

    #[error("subject count mismatch: view '{first}' has N={first_n}, view '{second}' has N={second_n}")]
    SubjectMismatch {
        first: String,
        first_n: usize,
        second: String,
        second_n: usize,
    },

    #[error("non-finite value in {block} update at iteration {iteration}")]
    Diverged { block: &'static str, iteration: usize },

    #[error("Lipschitz constant is not positive ({0:e})")]
    ZeroLipschitz(f64),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("cannot access {path}")]
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

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::OutOfRange { .. } => "out_of_range",
            Error::InvalidMode(_) => "invalid_mode",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::Asymmetric { .. } => "asymmetric",
            Error::SubjectMismatch { .. } => "subject_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::ZeroLipschitz(_) => "zero_lipschitz",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }
}
