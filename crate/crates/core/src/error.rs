use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed archive at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported dtype `{dtype}` for tensor `{tensor}` (expected f32, f16 or bf16)")]
    UnsupportedDtype { tensor: String, dtype: String },

    #[error("cannot pair tensors for layer `{layer}`: {message}")]
    Pairing { layer: String, message: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("gap recovery undefined: RTN metric equals full-precision metric ({0})")]
    UndefinedGap(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn layout(msg: impl Into<String>) -> Self {
        Error::Layout(msg.into())
    }

    pub(crate) fn corruption(msg: impl Into<String>) -> Self {
        Error::Corruption(msg.into())
    }
}
