use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("scene generation failed: {0}")]
    Unplaceable(String),

    #[error("format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("data truncated: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("checksum mismatch in episode {episode}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        episode: usize,
        stored: u32,
        computed: u32,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable numeric code, used as the process exit status by the CLI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Shape { .. } => 10,
            Error::InvalidInput(_) => 11,
            Error::InvalidConfig(_) => 12,
            Error::Unplaceable(_) => 13,
            Error::VersionMismatch { .. } => 20,
            Error::Truncated { .. } => 21,
            Error::Checksum { .. } => 22,
            Error::Format(_) => 23,
            Error::Io(_) => 30,
            Error::Json(_) => 31,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn bad_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
