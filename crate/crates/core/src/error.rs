use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> CoreError {
    CoreError::Shape {
        op,
        detail: detail.into(),
    }
}
