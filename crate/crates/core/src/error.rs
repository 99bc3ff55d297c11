use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),

    #[error("resolution {0} is too small (need at least 3 nodes per axis)")]
    ResolutionTooSmall(usize),

    #[error("window centered at ({x}, {y}) with radius {radius} contains no nodes")]
    EmptyWindow { x: f64, y: f64, radius: f64 },

    #[error("infeasible constraint box at node {node}: lower {lower} > upper {upper}")]
    InfeasibleBox { node: usize, lower: f64, upper: f64 },

    #[error("boundary datum {value} at node {node} lies outside [{lower}, {upper}]")]
    BoundaryOutsideBox {
        node: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("non-finite energy after sweep {sweep}")]
    NonFiniteEnergy { sweep: usize },

    #[error("exponent oscillation {oscillation} exceeds modulus bound {bound}")]
    ExponentOscillation { oscillation: f64, bound: f64 },

    #[error("solver did not converge in {sweeps} sweeps (last update {update:e})")]
    NotConverged { sweeps: usize, update: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LabError>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LabError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        LabError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::NonFiniteEnergy { .. } => 3,
            LabError::Stage { source, .. } => match source.as_ref() {
                LabError::Config(_) => 2,
                LabError::Invariant(_) => 4,
                _ => 3,
            },
            LabError::Invariant(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
