use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown sparsifier kind `{0}`")]
    UnknownSparsifier(String),

    #[error("client {client} has zero spectral efficiency and cannot upload")]
    UnreachableClient { client: usize },

    #[error(
        "local training diverged at round {round} (client {client}): loss {loss:.3e} exceeds 1e6 x initial {initial:.3e}; lower the learning rate"
    )]
    Divergence {
        round: usize,
        client: usize,
        loss: f64,
        initial: f64,
    },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
