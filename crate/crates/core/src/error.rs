use std::path::PathBuf;

/// Errors produced anywhere in the core crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("context overflow: {needed} tokens exceed the maximum of {max}")]
    ContextOverflow { needed: usize, max: usize },
    #[error("could not place {what} after {attempts} attempts")]
    Placement { what: String, attempts: usize },
    #[error("task `{0}` is infeasible in this scene")]
    InfeasibleTask(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("loss has no unmasked elements")]
    EmptyLossMask,
    #[error("training diverged at step {step}: loss is {value}")]
    Diverged { step: usize, value: f32 },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{path}: truncated file: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path}: inconsistent shapes: {detail}")]
    ShapeInconsistency { path: PathBuf, detail: String },
    #[error("{path}: malformed file: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
