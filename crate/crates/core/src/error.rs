use thiserror::Error;

use crate::microstructure::RveDescriptors;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("reconstruction infeasible after {attempts} attempts: {reason} (best achieved {best:?})")]
    ReconstructionInfeasible {
        attempts: usize,
        reason: String,
        best: RveDescriptors,
    },

    #[error("matrix phase is not face-connected: component sizes {component_sizes:?}")]
    Disconnected { component_sizes: Vec<usize> },

    #[error("descriptor undefined: {0}")]
    UndefinedDescriptor(String),

    #[error("material is (nearly) incompressible: poisson = {0}")]
    Incompressible(f64),

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("constitutive update failed: {0}")]
    Constitutive(String),

    #[error("solver diverged at step {step}: residual history {residuals:?}")]
    Divergence { step: usize, residuals: Vec<f64> },

    #[error("singular or indefinite system: {0}")]
    Singular(String),

    #[error("degenerate macro state: {0}")]
    DegenerateState(String),

    #[error("insufficient history: {0} steps (need at least 2)")]
    InsufficientHistory(usize),

    #[error("non-SPD homogenized tangent: eigenvalues {0:?}")]
    NonSpdTangent(Vec<f64>),

    #[error("deflation basis rank deficient in cluster {cluster}")]
    DeflationRank { cluster: usize },

    #[error("interpolation failed: {0}")]
    Interpolation(String),

    #[error("ill-conditioned correlation matrix: {0}")]
    Conditioning(String),

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("unknown categorical level: {0}")]
    UnknownLevel(String),

    #[error("division by zero-norm truth at index {0}")]
    ZeroNorm(usize),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the batch front end: 2 config, 3 reconstruction,
    /// 4 solver, 5 fit.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::ReconstructionInfeasible { .. }
            | Error::Disconnected { .. }
            | Error::UndefinedDescriptor(_) => 3,
            Error::Incompressible(_)
            | Error::InvalidMaterial(_)
            | Error::Constitutive(_)
            | Error::Divergence { .. }
            | Error::Singular(_)
            | Error::DegenerateState(_)
            | Error::InsufficientHistory(_)
            | Error::NonSpdTangent(_)
            | Error::DeflationRank { .. }
            | Error::Interpolation(_) => 4,
            Error::Conditioning(_)
            | Error::Fit(_)
            | Error::UnknownLevel(_)
            | Error::ZeroNorm(_)
            | Error::Calibration(_) => 5,
        }
    }
}
