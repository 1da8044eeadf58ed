use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad argument or malformed input data.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Non-finite values or a decomposition that failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A failure inside one block of the alternating loop.
    #[error("block `{block}` failed at iteration {iteration}: {source}")]
    Block {
        iteration: usize,
        block: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_block(self, iteration: usize, block: &'static str) -> Self {
        Error::Block {
            iteration,
            block,
            source: Box::new(self),
        }
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical(_) => true,
            Error::Block { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
