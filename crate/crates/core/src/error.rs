use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Loss became NaN or infinite during optimization.
    #[error(
        "loss is not finite at iteration {iteration} (last finite iteration: {})",
        last_finite.map_or_else(|| "none".to_string(), |i| i.to_string())
    )]
    NonFinite {
        iteration: usize,
        last_finite: Option<usize>,
    },

    /// Malformed binary or text file; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Attach a 1-based frame index to an error.
    pub fn in_frame(self, frame: usize) -> Self {
        match self {
            e @ Error::Frame { .. } => e,
            e => Error::Frame {
                frame,
                source: Box::new(e),
            },
        }
    }
}
