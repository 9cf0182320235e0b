use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the whole crate.
///
/// Variants are deliberately coarse: callers branch on the *kind* of failure
/// (bad input vs. bad state vs. I/O), not on individual call sites.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or batch dimensions are inconsistent.
    #[error("shape error: {0}")]
    Shape(String),

    /// An index or identifier falls outside the valid range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// A named entity (attribute, transform group, task head, file) is missing.
    #[error("not found: {0}")]
    NotFound(String),

    /// An operation was invoked in a state that cannot service it.
    #[error("state error: {0}")]
    State(String),

    /// Malformed on-disk data (IDX payloads, checkpoint envelopes, configs).
    #[error("format error: {0}")]
    Format(String),

    /// A metric sink failed; carries the logger's name so runs fail loudly
    /// rather than silently dropping measurements.
    #[error("logger `{logger}` failed: {source}")]
    Logging {
        logger: String,
        #[source]
        source: Box<Error>,
    },

    /// A checkpoint was produced by a different experiment configuration.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// A checkpoint's format version is not supported by this build.
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    /// Numerical failure during training (non-finite loss, divergence).
    #[error("runtime error: {0}")]
    Runtime(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

impl Error {
    /// Stable machine-readable tag, used by the CLI for exit-code mapping
    /// and by tests asserting on failure kinds.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Shape(_) => "shape-error",
            Error::OutOfRange(_) => "out-of-range",
            Error::NotFound(_) => "not-found",
            Error::State(_) => "state-error",
            Error::Format(_) => "format-error",
            Error::Logging { .. } => "logging-error",
            Error::CheckpointMismatch(_) => "checkpoint-mismatch",
            Error::Version { .. } => "version-error",
            Error::Runtime(_) => "runtime-error",
            Error::Config(_) => "config-error",
            Error::Io(_) => "io-error",
        }
    }
}
