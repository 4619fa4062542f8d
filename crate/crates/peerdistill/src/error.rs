//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A memory bank holds no slot whose label differs from the anchor label.
    #[error("no eligible negatives: every bank slot carries label {anchor_label}")]
    NoNegatives { anchor_label: usize },

    /// The brute-force oracle refuses banks above its scale limit.
    #[error("oracle refused: bank has {n} slots, limit is {limit}")]
    OracleScale { n: usize, limit: usize },

    /// Training produced a non-finite total loss; component values attached
    /// for diagnosis.
    #[error("non-finite loss: ce={ce} kl={kl} contrastive={contrastive}")]
    NonFiniteLoss { ce: f64, kl: f64, contrastive: f64 },

    /// Configuration file problem; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint was written under a different configuration.
    #[error("checkpoint incompatible with current config: {0}")]
    ConfigMismatch(String),

    /// A checkpoint failed its integrity check; nothing was loaded.
    #[error("checkpoint integrity failure: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
