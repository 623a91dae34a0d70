use std::io;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum PcsError {
    #[error("vector norm {norm:e} is too small to normalize")]
    DegenerateVector { norm: f64 },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("memory bank must hold at least one vector")]
    EmptyBank,
    #[error("input vector {index} has norm {norm}, expected unit norm")]
    NonUnitInput { index: usize, norm: f64 },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("cannot fit {k} clusters to {n} vectors")]
    TooManyClusters { k: usize, n: usize },
    #[error("forward cache does not match the encoder layout")]
    CacheMismatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("cluster model was fit on the {found} bank, expected {expected}")]
    DomainMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("prototype set is empty")]
    EmptyPrototypeSet,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("prior tracker has not been initialized")]
    UninitializedTracker,
    #[error("gradient layouts do not line up: {0}")]
    GradientShapeMismatch(String),
    #[error("confidence threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("class {0} has no labeled source sample")]
    MissingLabeledClass(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("feature file schema error at line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("class {0} is absent from source_labeled")]
    MissingClass(usize),
    #[error("class {class} has {have} samples, {need} shots requested")]
    InsufficientSamples { class: usize, have: usize, need: usize },
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("unsupported checkpoint format: {0}")]
    FormatVersionMismatch(String),
    #[error("dimension mismatch: model expects {expected}, data has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("dataset carries no held-out target labels")]
    MissingEvalLabels,
    #[error("k = {k} exceeds the {len} available entries")]
    KTooLarge { k: usize, len: usize },
    #[error("need at least two prototypes, got {0}")]
    TooFewPrototypes(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = PcsError> = std::result::Result<T, E>;
