use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("function is not deterministic: {first} vs {second} on repeated evaluation")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutogradError::Shape {
        op,
        detail: detail.into(),
    })
}
