use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes don't satisfy an operation's contract.
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument is out of its documented domain.
    #[error("{op}: invalid argument: {detail}")]
    Arg { op: &'static str, detail: String },

    /// A forward op produced NaN or Inf. Never silent.
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },

    #[error("config error: {0}")]
    Config(String),

    /// Model is not in a state that supports the request.
    #[error("state error: {0}")]
    State(String),

    /// A metric is undefined for the given inputs (e.g. single-class AUROC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
    pub fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Arg {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
