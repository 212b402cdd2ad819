use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point {index} is not finite")]
    NonFinite { index: usize },
    #[error("box parameters must be finite")]
    NonFiniteBox,
    #[error("box size must be positive, got w={w} h={h}")]
    NonPositiveSize { w: f64, h: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("target class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("layer index {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("cannot keep {k} of {count} queries")]
    TopKTooLarge { k: usize, count: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("gradient check failed at step {step}: {detail}")]
    GradientCheck { step: usize, detail: String },
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no class has ground truth; mean AP is undefined")]
    NoDefinedClasses,
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
}

/// Parse failures carry enough context to point at the offending field.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{source_name}:{line}: field {field}: {message}")]
pub struct ParseError {
    pub source_name: String,
    pub line: usize,
    pub field: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("checkpoint parameter mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
