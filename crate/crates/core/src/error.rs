use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("cannot encode an empty set")]
    EmptySet,

    #[error("invalid encoder stack between layers {upper} and {lower}: {detail}")]
    Config {
        upper: usize,
        lower: usize,
        detail: String,
    },

    #[error("training failed at step {step}: {detail}")]
    Training { step: usize, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
