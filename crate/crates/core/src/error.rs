use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes cannot be combined.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {context}")]
    Numeric { context: String },

    #[error("index {index} out of range for length {len} in {context}")]
    Index {
        index: usize,
        len: usize,
        context: &'static str,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Labels, vocabularies or splits that are internally inconsistent.
    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Prefix the message of context-carrying variants, leaving the kind intact.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric { context } => Error::Numeric {
                context: format!("{ctx}: {context}"),
            },
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
