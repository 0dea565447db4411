use thiserror::Error;

/// Errors raised anywhere in the horizontal diffusion pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HdmError {
    #[error("points are antipodal (|xi + xj| = {0:.3e}); parallel transport is undefined")]
    AntipodalPoints(f64),

    #[error("vector is not tangent at its base point (inner product {0:.3e})")]
    NotTangent(f64),

    #[error("vector is not of unit length (norm {0})")]
    NotUnit(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("local PCA at point {index} produced only {rank} positive singular values (need {needed})")]
    PcaRankDeficient { index: usize, rank: usize, needed: usize },

    #[error("neighbor count {k} too small (need at least {needed})")]
    NeighborCountTooSmall { k: usize, needed: usize },

    #[error("basis overlap is degenerate (smallest singular value {0:.3e})")]
    DegenerateOverlap(f64),

    #[error("graph is disconnected ({components} components)")]
    DisconnectedGraph { components: usize },

    #[error("vertex {0} has zero degree")]
    ZeroDegreeVertex(usize),

    #[error("correspondence blocks ({i},{j}) and ({j},{i}) are not transposes")]
    AsymmetricBlocks { i: usize, j: usize },

    #[error("negative weight {value} in block ({i},{j})")]
    NegativeWeight { i: usize, j: usize, value: f64 },

    #[error("operator is not symmetric (probe defect {0:.3e})")]
    NotSymmetric(f64),

    #[error("eigensolver did not converge: {converged} of {requested} pairs after {iterations} restarts")]
    NoConvergence { converged: usize, requested: usize, iterations: usize },

    #[error("eigenvalue {0:.3e} is negative beyond tolerance")]
    NegativeEigenvalue(f64),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dense oracle limited to {max} rows, got {got}")]
    ScaleTooLarge { max: usize, got: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),

    #[error("regime mismatch: expected {expected}, detected {detected}")]
    RegimeMismatch { expected: String, detected: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl HdmError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        HdmError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures of numerical procedures as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HdmError::NoConvergence { .. }
                | HdmError::NotSymmetric(_)
                | HdmError::NegativeEigenvalue(_)
                | HdmError::DegenerateOverlap(_)
                | HdmError::PcaRankDeficient { .. }
                | HdmError::DisconnectedGraph { .. }
                | HdmError::ZeroDegreeVertex(_)
                | HdmError::AntipodalPoints(_)
        )
    }
}

impl From<std::io::Error> for HdmError {
    fn from(e: std::io::Error) -> Self {
        HdmError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for HdmError {
    fn from(e: serde_json::Error) -> Self {
        HdmError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HdmError>;
