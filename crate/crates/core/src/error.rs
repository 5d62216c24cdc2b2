use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// The CLI maps variants onto process exit codes, so new variants should be
/// slotted into one of the existing families (usage/config, I/O, numeric).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error(
        "lift saturated: sqrt(c)*|v| = {value:.4} exceeds the overflow guard {guard}; \
         rescale the features (shrink alpha) before lifting"
    )]
    Saturation { value: f64, guard: f64 },

    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training failed at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The innermost error, looking through training context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Training { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
