use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix of dimension {dim} is not positive definite after the jitter schedule")]
    NotPositiveDefinite { dim: usize },

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("Wishart degrees of freedom {dof} below dimension {dim}")]
    DofTooSmall { dof: f64, dim: usize },

    #[error("parameter `{name}` must be positive, got {value}")]
    NonPositiveParameter { name: &'static str, value: f64 },

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("{what} = {value} is out of range")]
    OutOfRange { what: &'static str, value: usize },

    #[error("cannot split {n} rows into {n_train} training rows")]
    BadSplit { n: usize, n_train: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("length mismatch: {left} vs {right} rows")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("numerical failure at sweep {sweep}: {source}")]
    Numerical {
        sweep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn at_sweep(self, sweep: usize) -> Self {
        match self {
            e @ Error::Numerical { .. } => e,
            other => Error::Numerical {
                sweep,
                source: Box::new(other),
            },
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::NotPositiveDefinite { .. }
            | Error::NotSymmetric
            | Error::NonFinite(_)
            | Error::Numerical { .. } => 4,
            _ => 2,
        }
    }
}
