use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad input data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure in {tensor}: {detail}")]
    Numeric { tensor: String, detail: String },

    #[error("model format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unsupported model version {found}, this build reads version {supported}")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("insufficient evidence: {0}")]
    InsufficientEvidence(String),

    #[error("stream state error: {0}")]
    State(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
