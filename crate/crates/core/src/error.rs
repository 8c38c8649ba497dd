use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("point {point:?} is not inside any element")]
    Location { point: Vec<f64> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("gaussian approximation failed: {0}")]
    Approximation(String),

    #[error("failed to parse {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

impl Error {
    /// True for errors caused by the inputs (configuration, files, arguments)
    /// rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Self::InvalidArgument(_) | Self::Parse { .. } | Self::Json(_) | Self::Io(_) | Self::Location { .. })
    }
}
