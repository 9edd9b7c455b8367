use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("CTC target of length {target_len} with {repeats} repeats cannot be aligned to {frames} frames")]
    Infeasible { frames: usize, target_len: usize, repeats: usize },

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("word `{0}` is not in the lexicon")]
    OutOfVocabulary(String),

    #[error("division by zero: reference sequence is empty")]
    EmptyReference,

    #[error("non-finite loss ({0})")]
    NonFinite(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
