//! Where the error-model parameters come from.

use crate::io::{read_reliability, InputError};
use std::path::PathBuf;
use thiserror::Error;
use threshcox::{estimate_nuisance, MeasurementModel};

/// One of three mutually exclusive sources, or none for naive-only runs.
#[derive(Debug, Clone, PartialEq)]
pub enum NuisanceSource {
    None,
    /// External replicate study, summarized by random-effects ANOVA.
    Reliability(PathBuf),
    Explicit {
        alpha0: f64,
        alpha1: Vec<f64>,
        sigma_x2: f64,
        sigma_u2: f64,
    },
    /// `E[X|W] = intercept + slope·W` and `Var(X|W) = variance`.
    CalibrationLine {
        intercept: f64,
        slope: f64,
        variance: f64,
    },
}

#[derive(Debug, Error)]
pub enum NuisanceError {
    #[error("incompatible nuisance specification: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("nuisance estimation failed: {0}")]
    Model(#[from] threshcox::Error),
}

/// Raw command-line pieces before they are checked for consistency.
#[derive(Debug, Clone, Default)]
pub struct NuisanceArgs {
    pub reliability: Option<PathBuf>,
    pub alpha0: Option<f64>,
    pub alpha1: Option<Vec<f64>>,
    pub sigma_x2: Option<f64>,
    pub sigma_u2: Option<f64>,
    pub calibration: Option<Vec<f64>>,
}

impl NuisanceArgs {
    pub fn source(&self) -> Result<NuisanceSource, NuisanceError> {
        let explicit =
            self.alpha0.is_some() || self.alpha1.is_some() || self.sigma_x2.is_some() || self.sigma_u2.is_some();
        let given = [self.reliability.is_some(), explicit, self.calibration.is_some()];
        if given.iter().filter(|g| **g).count() > 1 {
            return Err(NuisanceError::Incompatible(
                "give only one of --reliability, explicit values or --calibration".into(),
            ));
        }
        if let Some(path) = &self.reliability {
            return Ok(NuisanceSource::Reliability(path.clone()));
        }
        if let Some(c) = &self.calibration {
            let [intercept, slope, variance] = c[..] else {
                return Err(NuisanceError::Incompatible(format!(
                    "--calibration takes intercept,slope,variance; got {} values",
                    c.len()
                )));
            };
            return Ok(NuisanceSource::CalibrationLine {
                intercept,
                slope,
                variance,
            });
        }
        if explicit {
            let (Some(sigma_x2), Some(sigma_u2)) = (self.sigma_x2, self.sigma_u2) else {
                return Err(NuisanceError::Incompatible(
                    "explicit values need both --sigma-x2 and --sigma-u2".into(),
                ));
            };
            return Ok(NuisanceSource::Explicit {
                alpha0: self.alpha0.unwrap_or(0.0),
                alpha1: self.alpha1.clone().unwrap_or_default(),
                sigma_x2,
                sigma_u2,
            });
        }
        Ok(NuisanceSource::None)
    }
}

impl NuisanceSource {
    /// Builds the model; `p` is the cohort's covariate count, which `α₁` must not exceed.
    pub fn resolve(&self, p: usize) -> Result<Option<MeasurementModel>, NuisanceError> {
        let model = match self {
            NuisanceSource::None => return Ok(None),
            NuisanceSource::Reliability(path) => estimate_nuisance(&read_reliability(path)?)?,
            NuisanceSource::Explicit {
                alpha0,
                alpha1,
                sigma_x2,
                sigma_u2,
            } => MeasurementModel::new(*alpha0, alpha1.clone(), *sigma_x2, *sigma_u2)?,
            NuisanceSource::CalibrationLine {
                intercept,
                slope,
                variance,
            } => MeasurementModel::from_calibration_line(*intercept, *slope, *variance)?,
        };
        if model.alpha1.len() > p {
            return Err(NuisanceError::Incompatible(format!(
                "error model has {} covariate slopes but the cohort has {p} covariates",
                model.alpha1.len()
            )));
        }
        Ok(Some(model))
    }
}
