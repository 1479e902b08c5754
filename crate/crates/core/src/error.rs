use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// `line` is 1-based; 0 means the file as a whole.
    #[error("{}", located("config error", *line, reason))]
    Config { line: usize, reason: String },

    #[error("{}", located("csv error", *line, reason))]
    Csv { line: usize, reason: String },

    #[error("plot error: {0}")]
    Plot(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a configuration problem.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Context { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

fn located(kind: &str, line: usize, reason: &str) -> String {
    if line == 0 {
        format!("{kind}: {reason}")
    } else {
        format!("{kind} at line {line}: {reason}")
    }
}
