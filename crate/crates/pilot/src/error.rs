use thiserror::Error;

#[derive(Debug, Error)]
pub enum PilotError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PilotError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        PilotError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PilotError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PilotError>;
