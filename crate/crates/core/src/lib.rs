//! Cox proportional hazards models with an unknown changepoint in a covariate
//! observed through additive normal measurement error.
//!
//! The relative risk is `exp(γᵀz + βx + ω(x − τ)₊)` while only `W = X + U` is
//! observed. Seven estimators are provided (naive, two regression calibrations,
//! two risk-regression variants, a pseudo partial likelihood and SIMEX) along
//! with sandwich variances, a limiting-bias solver and a simulation harness.

pub mod biasatlas;
pub mod error;
pub mod estimators;
pub mod melib;
pub mod mpple;
pub mod normal;
pub mod optimize;
pub mod pl_engine;
pub mod quadrature;
pub mod simex;
pub mod simharness;
pub mod survcore;
pub mod variance;

pub use biasatlas::{grid as bias_grid, limit_theta, AtlasConfig};
pub use error::{Error, Result};
pub use estimators::{fit_method, FitConfig, FitResult, FitWarning, Method};
pub use melib::{estimate_nuisance, MeasurementModel, Posterior, ReliabilityStudy};
pub use mpple::{fit_mpple, MppleConfig};
pub use optimize::{tau_bracket, OptimConfig};
pub use pl_engine::{parameter_names, Order, PlEvaluation, RiskModel, SubstitutionKind, SubstitutionPair, ThetaParams};
pub use simex::{fit_simex, Extrapolant, SimexPlan};
pub use simharness::{run_scenario, BiasTable, ErrorLaw, HarnessConfig, NuisanceMode, SimScenario};
pub use survcore::{build_cohort, risk_set, Cohort, EventTime, SubjectRecord};
