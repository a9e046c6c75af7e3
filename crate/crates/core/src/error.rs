use std::path::PathBuf;

/// Errors raised by the library.
///
/// Each variant maps to one of the CLI exit classes through
/// [`Error::exit_code`]: configuration problems exit with 2, I/O and file
/// format problems with 1, numeric divergence with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Several validation failures collected in one pass.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("empty activation window: no samples observed")]
    EmptyWindow,

    #[error("alpha calibration failed: raw penalty {0:e} is too small (dictionaries already aligned)")]
    Calibration(f64),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported {kind} version {found} (reader supports {supported})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data exhausted: {0}")]
    DataExhausted(String),

    #[error("{}: {source}", .path.display())]
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

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for the command-line tool: 1 I/O, 2 config, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Dimension(_)
            | Error::Calibration(_)
            | Error::EmptyWindow => 2,
            Error::Numeric(_) | Error::UndefinedCorrelation(_) => 3,
            Error::Format { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Checkpoint(_)
            | Error::DataExhausted(_)
            | Error::Io { .. } => 1,
        }
    }
}
