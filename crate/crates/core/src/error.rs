use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid contraction rank: {0}")]
    Rank(String),
    #[error("division by zero at element {index}")]
    DivisionByZero { index: usize },
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("loss must be rank 0, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("bad geometry: {0}")]
    BadGeometry(String),
    #[error("batch normalization in training mode needs more than one sample")]
    BatchTooSmall,
    #[error("incompatible spec: {0}")]
    IncompatibleSpec(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class count mismatch: source model has {source_classes}, target has {target_classes}")]
    ClassCountMismatch {
        source_classes: usize,
        target_classes: usize,
    },
    #[error("dataset is empty")]
    DataEmpty,
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
