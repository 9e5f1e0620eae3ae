//! Simulation–extrapolation.
//!
//! Extra error with variance `λσᵤ²` is added to `W` for each `λ` on a grid,
//! the naive fit is averaged over `B` remeasured datasets, and the mean
//! estimate is extrapolated component-wise back to `λ = −1`, where the total
//! error variance would vanish.

use crate::error::{Error, Result};
use crate::estimators::{fit_naive, matrix_rows, FitConfig, FitResult, FitWarning, Method};
use crate::melib::MeasurementModel;
use crate::survcore::Cohort;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolant {
    Linear,
    Quadratic,
    Cubic,
    /// `a + b / (c + λ)`.
    RationalLinear,
}

impl Extrapolant {
    fn min_points(self) -> usize {
        match self {
            Extrapolant::Linear => 2,
            Extrapolant::Quadratic | Extrapolant::RationalLinear => 3,
            Extrapolant::Cubic => 4,
        }
    }

    /// Fits `ys` against `lambdas` and evaluates the fit at `λ = −1`.
    pub fn extrapolate(self, lambdas: &[f64], ys: &[f64]) -> Result<f64> {
        if lambdas.len() < self.min_points() {
            return Err(Error::ExtrapolationFailure { usable: lambdas.len() });
        }
        match self {
            Extrapolant::Linear => polynomial_at_minus_one(lambdas, ys, 1),
            Extrapolant::Quadratic => polynomial_at_minus_one(lambdas, ys, 2),
            Extrapolant::Cubic => polynomial_at_minus_one(lambdas, ys, 3),
            Extrapolant::RationalLinear => rational_at_minus_one(lambdas, ys),
        }
    }
}

fn least_squares(design: DMatrix<f64>, ys: &[f64]) -> Result<(DVector<f64>, f64)> {
    let y = DVector::from_column_slice(ys);
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|_| Error::ExtrapolationFailure { usable: ys.len() })?;
    let rss = (design * &coef - y).norm_squared();
    Ok((coef, rss))
}

fn polynomial_at_minus_one(lambdas: &[f64], ys: &[f64], degree: usize) -> Result<f64> {
    let design = DMatrix::from_fn(lambdas.len(), degree + 1, |i, k| lambdas[i].powi(k as i32));
    let (coef, _) = least_squares(design, ys)?;
    Ok(coef.iter().enumerate().map(|(k, c)| c * (-1.0f64).powi(k as i32)).sum())
}

/// Profiles the nonlinear `c` by golden-section on `log(c − 1)`, with `(a, b)`
/// solved by least squares at each `c`; `c > 1` keeps the fit finite at `−1`.
fn rational_at_minus_one(lambdas: &[f64], ys: &[f64]) -> Result<f64> {
    let fit = |s: f64| -> Result<(DVector<f64>, f64)> {
        let c = 1.0 + s.exp();
        least_squares(
            DMatrix::from_fn(
                lambdas.len(),
                2,
                |i, k| if k == 0 { 1.0 } else { 1.0 / (c + lambdas[i]) },
            ),
            ys,
        )
    };
    let outcome = crate::optimize::profile_tau(
        |s| fit(s).map(|(_, rss)| -rss).unwrap_or(f64::NEG_INFINITY),
        -7.0,
        7.0,
        1e-8,
    );
    let c = 1.0 + outcome.tau.exp();
    let (coef, _) = fit(outcome.tau)?;
    let value = coef[0] + coef[1] / (c - 1.0);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::ExtrapolationFailure { usable: lambdas.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimexPlan {
    /// Strictly positive, ascending; `λ = 0` is always the naive fit.
    pub lambda_grid: Vec<f64>,
    pub b_per_lambda: usize,
    pub extrapolant: Extrapolant,
    pub seed: u64,
}

impl Default for SimexPlan {
    fn default() -> Self {
        Self {
            lambda_grid: vec![0.5, 1.0, 1.5, 2.0],
            b_per_lambda: 200,
            extrapolant: Extrapolant::Linear,
            seed: 20_180_101,
        }
    }
}

impl SimexPlan {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::InvalidConfig("SIMEX lambda grid is empty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidConfig("SIMEX lambdas must be positive and finite".into()));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(
                "SIMEX lambda grid must be strictly ascending".into(),
            ));
        }
        if self.b_per_lambda < 2 {
            return Err(Error::InvalidConfig(
                "SIMEX needs at least 2 datasets per lambda".into(),
            ));
        }
        Ok(())
    }
}

/// SIMEX with the naive estimator at every `λ`.
pub fn fit_simex(cohort: &Cohort, model: &MeasurementModel, plan: &SimexPlan, cfg: &FitConfig) -> Result<FitResult> {
    fit_simex_with(cohort, model, plan, cfg, fit_naive)
}

/// SIMEX with an arbitrary per-dataset fit, which must not depend on the
/// error model (it only sees the remeasured cohort).
pub fn fit_simex_with<F>(
    cohort: &Cohort,
    model: &MeasurementModel,
    plan: &SimexPlan,
    cfg: &FitConfig,
    fit: F,
) -> Result<FitResult>
where
    F: Fn(&Cohort, &FitConfig) -> Result<FitResult> + Sync,
{
    plan.validate()?;
    let base = fit(cohort, cfg)?;
    let d = base.theta_hat.dim();
    let su = model.sigma_u2.max(0.0).sqrt();
    let w = cohort.surrogates();
    let b_n = plan.b_per_lambda;

    let jobs: Vec<(usize, usize)> = (0..plan.lambda_grid.len())
        .flat_map(|l| (0..b_n).map(move |b| (l, b)))
        .collect();
    let fits: Vec<Option<FitResult>> = jobs
        .par_iter()
        .map(|&(l, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            rng.set_stream((l * b_n + b) as u64 + 1);
            let scale = plan.lambda_grid[l].sqrt() * su;
            let remeasured: Vec<f64> = w
                .iter()
                .map(|wi| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    wi + scale * e
                })
                .collect();
            fit(&cohort.with_surrogates(&remeasured).ok()?, cfg).ok()
        })
        .collect();

    let mut lambdas = vec![0.0];
    let mut means = vec![base.theta_hat.to_vec()];
    let mut covs = vec![base.covariance_matrix()];
    let mut failed = 0;
    for (l, &lambda) in plan.lambda_grid.iter().enumerate() {
        let ok: Vec<&FitResult> = fits[l * b_n..(l + 1) * b_n].iter().flatten().collect();
        failed += b_n - ok.len();
        if ok.is_empty() {
            continue;
        }
        let k = ok.len() as f64;
        let vecs: Vec<Vec<f64>> = ok.iter().map(|f| f.theta_hat.to_vec()).collect();
        lambdas.push(lambda);
        means.push((0..d).map(|a| vecs.iter().map(|v| v[a]).sum::<f64>() / k).collect());
        let mats: Option<Vec<DMatrix<f64>>> = ok.iter().map(|f| f.covariance_matrix()).collect();
        covs.push(mats.map(|m| m.iter().fold(DMatrix::zeros(d, d), |acc, c| acc + c) / k));
    }
    if lambdas.len() < 2 {
        return Err(Error::ExtrapolationFailure { usable: lambdas.len() });
    }

    let mut theta = vec![0.0; d];
    for (a, slot) in theta.iter_mut().enumerate() {
        let ys: Vec<f64> = means.iter().map(|m| m[a]).collect();
        *slot = plan.extrapolant.extrapolate(&lambdas, &ys)?;
    }
    if cfg.tau_fixed.is_some() {
        theta[d - 1] = base.theta_hat.tau;
    }

    let mut warnings: Vec<FitWarning> = base
        .warnings
        .iter()
        .filter(|w| matches!(w, FitWarning::BoundaryOptimum))
        .cloned()
        .collect();
    if failed > 0 {
        warnings.push(FitWarning::PseudoDatasetFailures {
            failed,
            total: jobs.len(),
        });
    }
    let mut covariance = None;
    if cfg.compute_variance {
        match covs.iter().cloned().collect::<Option<Vec<DMatrix<f64>>>>() {
            Some(mats) => {
                let mut cov = DMatrix::zeros(d, d);
                let mut ok = true;
                for i in 0..d {
                    for j in i..d {
                        let ys: Vec<f64> = mats.iter().map(|m| m[(i, j)]).collect();
                        match plan.extrapolant.extrapolate(&lambdas, &ys) {
                            Ok(v) => {
                                cov[(i, j)] = v;
                                cov[(j, i)] = v;
                            }
                            Err(_) => ok = false,
                        }
                    }
                }
                if ok && (0..d).all(|i| cov[(i, i)] >= 0.0) {
                    covariance = Some(matrix_rows(&cov));
                    warnings.push(FitWarning::ApproximateCovariance);
                } else {
                    warnings.push(FitWarning::CovarianceUnavailable {
                        reason: "extrapolated variance is negative".into(),
                    });
                }
            }
            None => warnings.push(FitWarning::CovarianceUnavailable {
                reason: "a pseudo-dataset fit had no covariance".into(),
            }),
        }
    }
    Ok(FitResult {
        method: Method::Simex,
        theta_hat: crate::pl_engine::ThetaParams::from_slice(&theta),
        covariance,
        converged: true,
        iterations: base.iterations,
        objective_at_opt: base.objective_at_opt,
        tau_bracket_used: base.tau_bracket_used,
        tau_fixed: cfg.tau_fixed.is_some(),
        warnings,
        objective_trace: Vec::new(),
        tau_jacobian_step: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pl_engine::ThetaParams;
    use crate::survcore::{build_cohort, SubjectRecord};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn cohort(seed: u64, n: usize) -> Cohort {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_cohort(
            (0..n)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    let rate = 0.6 * (0.405 * x + 0.693 * x.max(0.0)).exp();
                    let t = -rng.random::<f64>().ln() / rate;
                    {
                        let u: f64 = StandardNormal.sample(&mut rng);
                        SubjectRecord::new(t.min(1.0), t < 1.0, x + 0.5 * u)
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    /// Stub whose estimate is the mean surrogate variance, affine in `λ` on average.
    fn stub(c: &Cohort, _: &FitConfig) -> Result<FitResult> {
        let w = c.surrogates();
        let v = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        Ok(FitResult {
            method: Method::Naive,
            theta_hat: ThetaParams::new(vec![], v, 2.0 * v, 0.0),
            covariance: None,
            converged: true,
            iterations: 0,
            objective_at_opt: 0.0,
            tau_bracket_used: (-1.0, 1.0),
            tau_fixed: false,
            warnings: vec![],
            objective_trace: vec![],
            tau_jacobian_step: None,
        })
    }

    #[test]
    fn polynomial_extrapolants_reproduce_exact_polynomials() {
        let l = [0.0, 0.5, 1.0, 1.5, 2.0];
        let lin: Vec<f64> = l.iter().map(|x| 1.0 + 2.0 * x).collect();
        let cub: Vec<f64> = l.iter().map(|x| 1.0 - x + 0.5 * x * x + 0.25 * x * x * x).collect();
        assert_relative_eq!(
            Extrapolant::Linear.extrapolate(&l, &lin).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            Extrapolant::Quadratic.extrapolate(&l, &lin).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            Extrapolant::Cubic.extrapolate(&l, &cub).unwrap(),
            1.0 + 1.0 + 0.5 - 0.25,
            epsilon = 1e-10
        );
    }

    #[test]
    fn linear_through_three_points_by_hand() {
        // least-squares line through (0,0), (1,1), (2,3): slope 1.5, intercept −1/6
        let v = Extrapolant::Linear
            .extrapolate(&[0.0, 1.0, 2.0], &[0.0, 1.0, 3.0])
            .unwrap();
        assert_relative_eq!(v, -1.0 / 6.0 - 1.5, epsilon = 1e-12);
    }

    #[test]
    fn rational_recovers_exact_rational() {
        let l = [0.0, 0.5, 1.0, 1.5, 2.0];
        let ys: Vec<f64> = l.iter().map(|x| 0.3 + 0.8 / (2.5 + x)).collect();
        let v = Extrapolant::RationalLinear.extrapolate(&l, &ys).unwrap();
        assert_relative_eq!(v, 0.3 + 0.8 / 1.5, epsilon = 1e-6);
    }

    #[test]
    fn too_few_points_fail() {
        assert_eq!(
            Extrapolant::Quadratic.extrapolate(&[0.0, 1.0], &[1.0, 2.0]),
            Err(Error::ExtrapolationFailure { usable: 2 })
        );
    }

    #[test]
    fn zero_error_returns_naive() {
        let c = cohort(1, 300);
        let m = MeasurementModel::error_free(1.0);
        let plan = SimexPlan {
            b_per_lambda: 3,
            ..SimexPlan::default()
        };
        let cfg = FitConfig::default().without_variance();
        let s = fit_simex(&c, &m, &plan, &cfg).unwrap();
        let n = fit_naive(&c, &cfg).unwrap();
        for (a, b) in s.theta_hat.to_vec().iter().zip(n.theta_hat.to_vec()) {
            assert_relative_eq!(*a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn stubbed_affine_response_is_extrapolated_exactly() {
        let c = cohort(2, 2000);
        let m = MeasurementModel::new(0.0, vec![], 1.0, 0.25).unwrap();
        let plan = SimexPlan {
            lambda_grid: vec![1.0, 2.0],
            b_per_lambda: 400,
            ..SimexPlan::default()
        };
        let cfg = FitConfig::default().without_variance();
        let s = fit_simex_with(&c, &m, &plan, &cfg, stub).unwrap();
        // mean w² grows by 0.25λ, up to remeasurement noise
        let w = c.surrogates();
        let v0 = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((s.theta_hat.beta - (v0 - 0.25)).abs() < 0.01);
        assert!((s.theta_hat.omega - 2.0 * s.theta_hat.beta).abs() < 1e-12);
    }

    #[test]
    fn deterministic_under_seed() {
        let c = cohort(3, 300);
        let m = MeasurementModel::new(0.0, vec![], 1.0, 0.25).unwrap();
        let plan = SimexPlan {
            b_per_lambda: 4,
            ..SimexPlan::default()
        };
        let cfg = FitConfig {
            tau_fixed: Some(0.0),
            ..FitConfig::default()
        };
        let a = fit_simex(&c, &m, &plan, &cfg).unwrap();
        let b = fit_simex(&c, &m, &plan, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(
            a.warnings.contains(&FitWarning::ApproximateCovariance),
            "{:?}",
            a.warnings
        );
    }

    #[test]
    fn invalid_plans_rejected() {
        for plan in [
            SimexPlan {
                lambda_grid: vec![],
                ..SimexPlan::default()
            },
            SimexPlan {
                lambda_grid: vec![1.0, 0.5],
                ..SimexPlan::default()
            },
            SimexPlan {
                lambda_grid: vec![0.0],
                ..SimexPlan::default()
            },
            SimexPlan {
                b_per_lambda: 1,
                ..SimexPlan::default()
            },
        ] {
            assert!(matches!(plan.validate(), Err(Error::InvalidConfig(_))));
        }
    }
}
