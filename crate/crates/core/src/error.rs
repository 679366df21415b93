use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed document: {0}")]
    MalformedDocument(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("free space must form exactly one 4-connected component, found {components}")]
    DisconnectedFreeSpace { components: usize },

    #[error("workspace is open: perimeter cell ({i}, {j}) is free")]
    OpenWorkspace { i: usize, j: usize },

    #[error("degenerate normal at ({x}, {y})")]
    DegenerateNormal { x: f64, y: f64 },

    #[error("point ({x}, {y}) is outside the sampled domain")]
    OutOfDomain { x: f64, y: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("forcing must be strictly negative, got {value} at cell ({i}, {j})")]
    NegativeForcingViolation { i: usize, j: usize, value: f64 },

    #[error("solution is not strictly positive at free cell ({i}, {j}): {value:e}")]
    PositivityViolation { i: usize, j: usize, value: f64 },

    #[error("label {0} has no priority")]
    UnmappedLabel(u16),

    #[error("boundary chain ordering is unavailable")]
    UnorderedBoundary,

    #[error("guidance field vanishes (|v| = {norm:e}) where the constraint is active")]
    VanishingGuidance { norm: f64 },

    #[error("backstepping constraint violated with vanishing coefficient (residual {residual:e})")]
    DegenerateCoefficient { residual: f64 },

    #[error("initial state is unsafe (barrier value {value:e})")]
    StartUnsafe { value: f64 },

    #[error("time step {dt} exceeds the stability guard {limit}")]
    StepTooLarge { dt: f64, limit: f64 },

    #[error("fields live on different lattices")]
    GridMismatch,

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn out_of_domain(y: crate::Vec2) -> Self {
        Error::OutOfDomain { x: y.x, y: y.y }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
