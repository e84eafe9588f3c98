use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("scatterer radius {q_star} does not give a finite horizon: {reason}")]
    HorizonViolation { q_star: f64, reason: String },

    #[error("invalid scatterer radius {0}: must lie in (0, 1/2)")]
    InvalidRadius(f64),

    #[error("no scatterer within the certified horizon {bound} along the ray")]
    HorizonExceeded { bound: f64 },

    #[error("particle bounced {0} times inside one scatterer")]
    TrappedGuard(u64),

    #[error("momentum {0:e} stalled in free flight")]
    StalledTrajectory(f64),

    #[error("adaptive step fell below {min:e} at t = {t}")]
    StepUnderflow { t: f64, min: f64 },

    #[error("quadrature did not reach tolerance {tol:e} after {evaluations} refinements")]
    QuadratureFailure { tol: f64, evaluations: usize },

    #[error("momentum norm {0:e} is degenerate")]
    DegenerateMomentum(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-positive value {value} at t = {t}")]
    NonPositiveValue { t: f64, value: f64 },

    #[error("window is not diffusive: fitted exponent {exponent:.3}")]
    NotDiffusive { exponent: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{flagged} of {total} trajectories were flagged, above the 1% limit")]
    ExclusionThreshold { flagged: usize, total: usize },
}
