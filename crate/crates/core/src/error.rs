use thiserror::Error;

/// Errors surfaced by the tensor engine, the adaptation loops, and the
/// checkpoint format.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: non-finite input value")]
    NonFiniteInput { op: &'static str },

    #[error("gradient output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("gradient output is not attached to the graph")]
    DetachedOutput,

    #[error("tensor {index} of `wrt` is not attached to the graph")]
    DetachedWrt { index: usize },

    #[error(
        "tensor {index} of `wrt` is unreachable from the output \
         (pass allow_unreachable to receive zeros instead)"
    )]
    UnreachableWrt { index: usize },

    #[error("non-finite {what} at inner step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("update rule mode {mode} requires a hyperparameter generator")]
    MissingGenerator { mode: &'static str },

    #[error("inner step {step} out of range: generator was built for S = {steps}")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("learning state has length {got}, expected 2N = {expected}")]
    StateLength { got: usize, expected: usize },

    #[error("hyperparameter vector has {got} entries but the learner has {expected} units")]
    UnitCountMismatch { got: usize, expected: usize },

    #[error("empty batch passed to {op}")]
    EmptyBatch { op: &'static str },

    #[error("checkpoint version {found:?} unsupported (expected {expected:?})")]
    CheckpointVersion { found: String, expected: String },

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error(
        "checkpoint structural conflict: {field} is {checkpoint} in the checkpoint \
         but {runtime} in the runtime config"
    )]
    StructuralConflict {
        field: &'static str,
        checkpoint: String,
        runtime: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Adds meta-training context to an inner-loop failure.
    pub fn with_task_context(self, iteration: u64, task: usize) -> Error {
        match self {
            Error::NonFinite { what, step } => Error::Numeric(format!(
                "non-finite {what} at inner step {step} (outer iteration {iteration}, task {task})"
            )),
            other => other,
        }
    }

    /// True for failures of the numbers themselves rather than of the setup.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Numeric(_) | Error::NonFiniteInput { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
