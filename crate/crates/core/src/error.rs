use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("numeric failure at layer {layer}: {message}")]
    NumericFailure { layer: usize, message: String },

    /// Misuse of the forward/backward tape contract (backward before
    /// forward, or a second backward on a spent tape).
    #[error("tape contract violation: {0}")]
    TapeContract(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    /// A data or checkpoint file failed to parse. `offset` is the byte
    /// position at which the problem was detected.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Packed-inference mode does not match the network (e.g. a 1/1
    /// packed net fed real activations mid-network).
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    /// A theory construction was invoked with a width below the lemma's
    /// hypothesis. Distinct from the probabilistic failure event, which
    /// is reported through the certificate.
    #[error("width hypothesis violated: {0}")]
    WidthHypothesis(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
