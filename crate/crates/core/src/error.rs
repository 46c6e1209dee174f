use thiserror::Error;

/// Errors produced by the workbench library.
#[derive(Debug, Error)]
pub enum Error {
    /// A primitive was applied to tensors whose shapes do not fit its rule.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// `backward` was asked to differentiate a non-scalar node.
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    /// A caller-supplied argument violated a precondition.
    #[error("{0}")]
    InvalidArgument(String),

    /// Structured parse failure for binary file formats (IDX, checkpoints).
    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: u64,
        message: String,
    },

    /// A checkpoint does not match the architecture the caller requested.
    #[error("architecture mismatch: checkpoint has `{found}`, requested `{requested}`")]
    ArchitectureMismatch { found: String, requested: String },

    /// Loss or gradient left the representable range.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Bad experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
