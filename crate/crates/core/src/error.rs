use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("dependency order violated: {0}")]
    DependencyOrder(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Transport(_) | Error::Protocol(_) => 4,
            _ => 2,
        }
    }
}
