use thiserror::Error;

/// Errors produced by the search engine and its IO surfaces.
#[derive(Debug, Error)]
pub enum TctError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TctError {
    pub fn shape(msg: impl Into<String>) -> Self {
        TctError::Shape(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        TctError::Input(msg.into())
    }

    pub fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        TctError::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    /// True for errors that indicate a broken internal guarantee rather than bad input.
    pub fn is_invariant(&self) -> bool {
        matches!(self, TctError::Invariant(_))
    }
}

pub type Result<T> = std::result::Result<T, TctError>;
