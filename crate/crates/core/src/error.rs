use thiserror::Error;

/// Errors raised anywhere in the vocoder pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or weights that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data outside an operation's domain.
    #[error("input error: {0}")]
    Input(String),

    /// A NaN/Inf or a failed numerical procedure, tagged with the primitive.
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Inversion of one element during synthesis failed.
    #[error("inversion failed at flow {flow}, row {row}, column {col}: {detail}")]
    Inversion {
        flow: usize,
        row: usize,
        col: usize,
        detail: String,
    },

    /// Malformed binary file (checkpoint, mel cache).
    #[error("format error: {0}")]
    Format(String),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
