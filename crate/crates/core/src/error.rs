use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input too short: {0}")]
    Length(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("insufficient data: {0}")]
    Capacity(String),

    #[error("unknown id: {0}")]
    Lookup(String),

    #[error("degenerate enrollment: mean embedding has zero norm")]
    DegenerateEnrollment,

    #[error("embedding contract violated: norm {0} deviates from 1")]
    Contract(f64),

    #[error("incomplete scores: {0}")]
    IncompleteScores(String),

    #[error("class coverage: {0}")]
    ClassCoverage(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("missing {artifact}; run `{command}` first")]
    Dependency { artifact: PathBuf, command: &'static str },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit status used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dependency { .. } => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
