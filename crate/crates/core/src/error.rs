use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid construction parameters (schedule, model, trap, detector, corrector).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("timestep {t} out of range 1..={max}")]
    Index { t: u32, max: u32 },

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt trace at byte offset {offset} (frame {frame}): {reason}")]
    Corrupt {
        offset: u64,
        frame: usize,
        reason: String,
    },

    #[error("unsupported trace version {0}")]
    Version(u32),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Index { .. }
                | Error::Usage(_)
                | Error::Shape { .. }
                | Error::Format(_)
                | Error::Corrupt { .. }
                | Error::Version(_)
        )
    }
}
