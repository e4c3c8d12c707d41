use thiserror::Error;

/// Error type shared across the crate.
#[derive(Error, Debug)]
pub enum DeconError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("train error: {0}")]
    Train(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("stats error: {0}")]
    Stats(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DeconError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DeconError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, DeconError>;
