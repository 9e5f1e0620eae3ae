use thiserror::Error;

/// Errors produced while building cohorts, evaluating likelihoods or fitting models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("cohort has no subjects")]
    EmptyCohort,
    #[error("malformed record at row {row}: {reason}")]
    MalformedRecord { row: usize, reason: String },
    #[error("replicate study has no person with two or more readings; error variance is unidentifiable")]
    Unidentifiable,
    #[error("posterior standard deviation eta is zero; the smooth substitution is undefined")]
    DegenerateEta,
    #[error("log relative risk {exponent:.3} exceeds the exponent cap {cap}")]
    Overflow { exponent: f64, cap: f64 },
    #[error("empty risk set at event time {time}")]
    EmptyRiskSet { time: f64 },
    #[error("{method} did not converge after {iterations} iterations")]
    NonConvergence { method: String, iterations: usize },
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("score Jacobian is singular")]
    SingularLambda,
    #[error("degenerate changepoint bracket: all values equal {value}")]
    DegenerateBracket { value: f64 },
    #[error("calibrated covariate is constant; changepoint bracket cannot be formed")]
    DegenerateCalibration,
    #[error("only {succeeded} of {requested} bootstrap resamples converged")]
    TooFewBootstrapSuccesses { succeeded: usize, requested: usize },
    #[error("quadrature produced a non-finite value")]
    QuadratureFailure,
    #[error("extrapolation needs at least 2 usable lambda points, found {usable}")]
    ExtrapolationFailure { usable: usize },
    #[error("baseline hazard calibration failed for incidence {target}")]
    CalibrationFailure { target: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
