use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: shape mismatch: {detail}")]
    Shape { primitive: &'static str, detail: String },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("{primitive}: bad attribute `{name}`: {detail}")]
    Attribute {
        primitive: &'static str,
        name: String,
        detail: String,
    },

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite value {value} at flat index {index} ({context})")]
    NonFinite { index: usize, value: f64, context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(primitive: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        primitive,
        detail: detail.into(),
    }
}
