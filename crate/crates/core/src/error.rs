use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding one of the binary container formats
/// (feature banks, weight files, encrypted updates).
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated payload while reading {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("inconsistent contents: {0}")]
    Inconsistent(String),

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("incompatible operands: {0}")]
    Incompatible(String),

    #[error("value at index {index} out of range: {detail}")]
    Range { index: usize, detail: String },

    #[error("capacity overflow: {0}")]
    Overflow(String),

    #[error("key mismatch: expected fingerprint {expected}, found {found}")]
    KeyMismatch { expected: String, found: String },

    #[error("decode failure: {0}")]
    Decode(String),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("client {client_id}: {source}")]
    Client {
        client_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn incompatible(msg: impl Into<String>) -> Self {
        Error::Incompatible(msg.into())
    }

    pub(crate) fn for_client(self, client_id: &str) -> Self {
        Error::Client {
            client_id: client_id.to_owned(),
            source: Box::new(self),
        }
    }
}
