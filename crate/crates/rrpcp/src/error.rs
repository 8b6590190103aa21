//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two arguments that must agree in shape do not.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A least-squares submatrix was too close to singular to trust.
    #[error(
        "ill-conditioned LS: smallest normalized singular value {smallest:.3e} below floor {floor:.3e} (|support| = {support_len})"
    )]
    IllConditionedLs {
        smallest: f64,
        floor: f64,
        support_len: usize,
    },

    /// The requested subspace rank leaves no complement to project onto.
    #[error("subspace rank {rank} leaves an empty complement in ambient dimension {ambient}")]
    EmptyComplement { rank: usize, ambient: usize },

    /// A moving object left the image despite the configured bounds policy.
    #[error("object {object} leaves the image at frame {frame}")]
    ObjectLeftImage { object: usize, frame: usize },

    /// A pipeline run failed at a specific frame.
    #[error("run aborted at frame {frame}: {source}")]
    FrameAborted {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    /// Underlying linear-algebra routine failed (LAPACK info != 0 and similar).
    #[error("linear algebra backend failure: {0}")]
    Linalg(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed JSON in a config file.
    #[error("config parse error: {0}")]
    ConfigParse(#[from] serde_json::Error),

    /// Structurally valid file with contents violating the format contract.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn at_frame(self, frame: usize) -> Self {
        Error::FrameAborted {
            frame,
            source: Box::new(self),
        }
    }
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
