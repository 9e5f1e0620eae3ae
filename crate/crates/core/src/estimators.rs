//! Substitution estimators: naive, RC1, RC2, RR1 and the bootstrap-corrected RR2.

use crate::error::{Error, Result};
use crate::melib::MeasurementModel;
use crate::optimize::{newton, newton_with, scan_profile_tau, tau_bracket, NewtonOutcome, OptimConfig};
use crate::pl_engine::{
    calibrated, evaluate, InducedRiskModel, Layout, Order, RiskModel, SubstitutionPair, ThetaParams,
};
use crate::survcore::Cohort;
use crate::variance::{sandwich_naive_rc1, sandwich_rc2, SandwichParts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Rc1,
    Rc2,
    Rr1,
    Rr2,
    Mpple,
    Simex,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Naive,
        Method::Rc1,
        Method::Rc2,
        Method::Rr1,
        Method::Rr2,
        Method::Mpple,
        Method::Simex,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Rc1 => "rc1",
            Method::Rc2 => "rc2",
            Method::Rr1 => "rr1",
            Method::Rr2 => "rr2",
            Method::Mpple => "mpple",
            Method::Simex => "simex",
        }
    }

    /// Whether the method needs the error model at all.
    pub fn needs_nuisance(self) -> bool {
        self != Method::Naive
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitWarning {
    SigmaW2ClampedToZero,
    IterationCapHit,
    Diverged,
    /// Maximum at (or within tolerance of) an end of the `τ` bracket.
    BoundaryOptimum,
    /// Calibrated values were constant; the bracket came from `W` instead.
    DegenerateCalibration,
    BootstrapFailures {
        failed: usize,
        requested: usize,
    },
    /// `τ̂` left the bracket after a correction step and was clamped.
    TauClamped,
    ApproximateCovariance,
    CovarianceUnavailable {
        reason: String,
    },
    /// Parameter-level failures of SIMEX pseudo-datasets.
    PseudoDatasetFailures {
        failed: usize,
        total: usize,
    },
    OuterIterationCapHit,
}

/// Outcome of one estimator on one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub theta_hat: ThetaParams,
    /// Row-major `(p+3)×(p+3)` covariance; absent when it could not be formed.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub converged: bool,
    pub iterations: usize,
    pub objective_at_opt: f64,
    pub tau_bracket_used: (f64, f64),
    /// `τ` was supplied, not estimated.
    pub tau_fixed: bool,
    pub warnings: Vec<FitWarning>,
    /// Objective after each accepted Newton step of the final fit.
    pub objective_trace: Vec<f64>,
    /// Step used for the `τ` column of the score Jacobian, when differenced numerically.
    #[serde(default)]
    pub tau_jacobian_step: Option<f64>,
}

impl FitResult {
    /// Standard errors from the covariance diagonal, in `θ` order.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.len()).map(|i| c[i][i].max(0.0).sqrt()).collect())
    }

    pub fn covariance_matrix(&self) -> Option<nalgebra::DMatrix<f64>> {
        self.covariance.as_ref().map(|c| {
            let d = c.len();
            nalgebra::DMatrix::from_fn(d, d, |i, j| c[i][j])
        })
    }
}

pub(crate) fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub optim: OptimConfig,
    /// Fix `τ` at this value instead of profiling it.
    pub tau_fixed: Option<f64>,
    pub compute_variance: bool,
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub mpple: crate::mpple::MppleConfig,
    pub simex: crate::simex::SimexPlan,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            tau_fixed: None,
            compute_variance: true,
            bootstrap_reps: 50,
            seed: 20_180_101,
            mpple: crate::mpple::MppleConfig::default(),
            simex: crate::simex::SimexPlan::default(),
        }
    }
}

impl FitConfig {
    pub fn without_variance(&self) -> Self {
        Self {
            compute_variance: false,
            ..self.clone()
        }
    }
}

/// Point estimate before variance and bookkeeping.
#[derive(Debug, Clone)]
pub(crate) struct ProfileFit {
    pub theta: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
    pub at_boundary: bool,
    pub trace: Vec<f64>,
}

/// Maximizes the profile `τ ↦ max_ψ l(ψ, τ)` over the bracket.
///
/// Each inner fit starts from the previous converged `ψ̂`, which is only a
/// speed-up: the inner problem has a unique maximum for the substitution
/// methods. Smooth objectives are then refined by Newton on the full vector.
pub(crate) fn profile_fit<F>(
    objective: F,
    p: usize,
    bracket: (f64, f64),
    smooth: bool,
    cfg: &FitConfig,
) -> Result<ProfileFit>
where
    F: Fn(&[f64], Order) -> Result<crate::pl_engine::PlEvaluation>,
{
    profile_fit_with(objective, p, bracket, smooth, cfg, Order::Hessian)
}

/// [`profile_fit`] with Newton trial points evaluated at `trial`; `Order::Value`
/// suits objectives whose second derivatives are costly.
pub(crate) fn profile_fit_with<F>(
    objective: F,
    p: usize,
    bracket: (f64, f64),
    smooth: bool,
    cfg: &FitConfig,
    trial: Order,
) -> Result<ProfileFit>
where
    F: Fn(&[f64], Order) -> Result<crate::pl_engine::PlEvaluation>,
{
    let layout = Layout { p };
    let psi_idx = layout.psi();
    let opt = &cfg.optim;
    let inner = |tau: f64, start: &[f64]| -> Result<NewtonOutcome> {
        let mut x = start.to_vec();
        x[layout.tau()] = tau;
        newton_with(&objective, &x, &psi_idx, opt, trial)
    };

    let zero = vec![0.0; layout.dim()];
    let (tau, at_boundary, warm) = match cfg.tau_fixed {
        Some(t) => (t, false, zero.clone()),
        None => {
            let warm = RefCell::new(zero.clone());
            let prof = scan_profile_tau(
                |t| {
                    let start = warm.borrow().clone();
                    match inner(t, &start) {
                        Ok(out) if out.converged => {
                            let v = out.value;
                            *warm.borrow_mut() = out.x;
                            v
                        }
                        Ok(out) => out.value,
                        Err(_) => f64::NEG_INFINITY,
                    }
                },
                bracket.0,
                bracket.1,
                opt.tau_tol,
                opt.tau_scan_points,
                opt.tau_scan_refine,
            );
            (prof.tau, prof.at_boundary, warm.into_inner())
        }
    };

    // the search ends within tolerance of `tau`, so its last ψ is a close start
    let mut fit = match inner(tau, &warm) {
        Ok(f) if f.converged => f,
        _ => inner(tau, &zero)?,
    };
    let mut iterations = fit.iterations;
    if smooth && opt.polish_tau && cfg.tau_fixed.is_none() && fit.converged {
        if let Ok(full) = newton(&objective, &fit.x, &layout.all(), opt) {
            let t = full.x[layout.tau()];
            if full.converged && t >= bracket.0 && t <= bracket.1 && full.value >= fit.value {
                iterations += full.iterations;
                fit = full;
            }
        }
    }
    Ok(ProfileFit {
        theta: fit.x,
        value: fit.value,
        converged: fit.converged,
        diverged: fit.diverged,
        iterations,
        at_boundary,
        trace: fit.trace,
    })
}

fn warnings_for(fit: &ProfileFit, model: Option<&MeasurementModel>) -> Vec<FitWarning> {
    let mut w = Vec::new();
    if model.is_some_and(|m| m.sigma_x2_clamped) {
        w.push(FitWarning::SigmaW2ClampedToZero);
    }
    if fit.diverged {
        w.push(FitWarning::Diverged);
    } else if !fit.converged {
        w.push(FitWarning::IterationCapHit);
    }
    if fit.at_boundary {
        w.push(FitWarning::BoundaryOptimum);
    }
    w
}

/// Bracket from quantiles of `values`, or of `W` when `values` are constant.
fn bracket_with_fallback(
    values: &[f64],
    cohort: &Cohort,
    q: f64,
    warnings: &mut Vec<FitWarning>,
) -> Result<(f64, f64)> {
    match tau_bracket(values, q) {
        Ok(b) => Ok(b),
        Err(Error::DegenerateBracket { .. }) => {
            warnings.push(FitWarning::DegenerateCalibration);
            tau_bracket(&cohort.surrogates(), q)
        }
        Err(e) => Err(e),
    }
}

fn active_indices(layout: Layout, cfg: &FitConfig) -> Vec<usize> {
    if cfg.tau_fixed.is_some() {
        layout.psi()
    } else {
        layout.all()
    }
}

fn attach_variance(result: &mut FitResult, parts: Result<SandwichParts>) {
    match parts {
        Ok(p) => {
            result.covariance = Some(matrix_rows(&p.covariance));
            result.tau_jacobian_step = p.tau_step;
        }
        Err(e) => result
            .warnings
            .push(FitWarning::CovarianceUnavailable { reason: e.to_string() }),
    }
}

fn base_result(
    method: Method,
    fit: &ProfileFit,
    bracket: (f64, f64),
    cfg: &FitConfig,
    warnings: Vec<FitWarning>,
) -> FitResult {
    FitResult {
        method,
        theta_hat: ThetaParams::from_slice(&fit.theta),
        covariance: None,
        converged: fit.converged,
        iterations: fit.iterations,
        objective_at_opt: fit.value,
        tau_bracket_used: bracket,
        tau_fixed: cfg.tau_fixed.is_some(),
        warnings,
        objective_trace: fit.trace.clone(),
        tau_jacobian_step: None,
    }
}

fn fit_substitution(
    method: Method,
    cohort: &Cohort,
    g: SubstitutionPair,
    model: Option<&MeasurementModel>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.optim.validate()?;
    let mut warnings = Vec::new();
    let bracket = match method {
        Method::Naive => tau_bracket(&cohort.surrogates(), cfg.optim.tau_quantile_q)?,
        _ => bracket_with_fallback(g.g1(), cohort, cfg.optim.tau_quantile_q, &mut warnings)?,
    };
    let cap = cfg.optim.exponent_cap;
    let fit = profile_fit(
        |x, o| evaluate(cohort, &g, x, o, cap),
        cohort.covariate_dim(),
        bracket,
        g.smooth_in_tau(),
        cfg,
    )?;
    warnings.extend(warnings_for(&fit, model));
    let mut result = base_result(method, &fit, bracket, cfg, warnings);
    if cfg.compute_variance && fit.converged {
        let active = active_indices(g.layout(), cfg);
        let parts = if g.smooth_in_tau() {
            sandwich_rc2(cohort, &fit.theta, &g, &active, cap)
        } else {
            sandwich_naive_rc1(cohort, &fit.theta, &g, &active, cap)
        };
        attach_variance(&mut result, parts);
    }
    Ok(result)
}

fn require_convergence(result: FitResult) -> Result<FitResult> {
    if result.converged {
        Ok(result)
    } else {
        Err(Error::NonConvergence {
            method: result.method.to_string(),
            iterations: result.iterations,
        })
    }
}

/// Substitutes `W` for `X`.
pub fn fit_naive(cohort: &Cohort, cfg: &FitConfig) -> Result<FitResult> {
    fit_substitution(Method::Naive, cohort, SubstitutionPair::naive(cohort), None, cfg).and_then(require_convergence)
}

/// Substitutes `E[X|W,Z]` for `X`.
pub fn fit_rc1(cohort: &Cohort, model: &MeasurementModel, cfg: &FitConfig) -> Result<FitResult> {
    fit_substitution(
        Method::Rc1,
        cohort,
        SubstitutionPair::rc1(cohort, model),
        Some(model),
        cfg,
    )
    .and_then(require_convergence)
}

/// Substitutes `E[X|W,Z]` for `X` and `E[(X − τ)₊|W,Z]` for `(X − τ)₊`.
pub fn fit_rc2(cohort: &Cohort, model: &MeasurementModel, cfg: &FitConfig) -> Result<FitResult> {
    let g = SubstitutionPair::rc2(cohort, model)?;
    fit_substitution(Method::Rc2, cohort, g, Some(model), cfg).and_then(require_convergence)
}

/// Replaces the relative risk by its conditional expectation given `(W, Z)`.
pub fn fit_rr1(cohort: &Cohort, model: &MeasurementModel, cfg: &FitConfig) -> Result<FitResult> {
    cfg.optim.validate()?;
    let rr = InducedRiskModel::new(cohort, model);
    let mut warnings = Vec::new();
    let bracket = bracket_with_fallback(
        &calibrated(cohort, model),
        cohort,
        cfg.optim.tau_quantile_q,
        &mut warnings,
    )?;
    let cap = cfg.optim.exponent_cap;
    let smooth = model.eta() > 0.0;
    let fit = profile_fit(
        |x, o| evaluate(cohort, &rr, x, o, cap),
        cohort.covariate_dim(),
        bracket,
        smooth,
        cfg,
    )?;
    warnings.extend(warnings_for(&fit, Some(model)));
    let mut result = base_result(Method::Rr1, &fit, bracket, cfg, warnings);
    if cfg.compute_variance && fit.converged {
        let active = active_indices(rr.layout(), cfg);
        let parts = if smooth {
            sandwich_rc2(cohort, &fit.theta, &rr, &active, cap)
        } else {
            let g = SubstitutionPair::rc1(cohort, model);
            sandwich_naive_rc1(cohort, &fit.theta, &g, &active, cap)
        };
        attach_variance(&mut result, parts);
    }
    require_convergence(result)
}

/// Full-vector Newton from `start`, accepted only when it converges inside the
/// bracket. A resample's RR1 optimum lies close to the original one, so this
/// usually replaces the profile search at a fraction of the cost.
fn warm_rr1(cohort: &Cohort, model: &MeasurementModel, start: &[f64], cfg: &FitConfig) -> Option<Vec<f64>> {
    if model.eta() <= 0.0 {
        return None;
    }
    let rr = InducedRiskModel::new(cohort, model);
    let bracket = tau_bracket(&calibrated(cohort, model), cfg.optim.tau_quantile_q).ok()?;
    let active = active_indices(rr.layout(), cfg);
    let cap = cfg.optim.exponent_cap;
    let out = newton(|x, o| evaluate(cohort, &rr, x, o, cap), start, &active, &cfg.optim).ok()?;
    let t = out.x[rr.layout().tau()];
    (out.converged && t > bracket.0 && t < bracket.1).then_some(out.x)
}

/// Bootstrap bias-corrected RR1: `2θ̂ − mean_b θ̂*_b`.
///
/// Resample `b` draws subjects with replacement from a ChaCha8 stream keyed by
/// `(seed, b)`, so results do not depend on thread scheduling.
pub fn fit_rr2(cohort: &Cohort, model: &MeasurementModel, cfg: &FitConfig, bootstrap_reps: usize) -> Result<FitResult> {
    if bootstrap_reps < 2 {
        return Err(Error::InvalidConfig("RR2 needs at least 2 bootstrap resamples".into()));
    }
    let base = fit_rr1(cohort, model, &cfg.without_variance())?;
    let base_theta = base.theta_hat.to_vec();
    let n = cohort.len();
    let inner_cfg = cfg.without_variance();
    let draws: Vec<Option<Vec<f64>>> = (0..bootstrap_reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(b as u64 + 1);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resample = cohort.resample(&idx).ok()?;
            warm_rr1(&resample, model, &base_theta, &inner_cfg)
                .or_else(|| fit_rr1(&resample, model, &inner_cfg).ok().map(|f| f.theta_hat.to_vec()))
        })
        .collect();
    let ok: Vec<&Vec<f64>> = draws.iter().flatten().collect();
    if 2 * ok.len() < bootstrap_reps {
        return Err(Error::TooFewBootstrapSuccesses {
            succeeded: ok.len(),
            requested: bootstrap_reps,
        });
    }
    let d = base.theta_hat.dim();
    let k = ok.len() as f64;
    let mean: Vec<f64> = (0..d).map(|a| ok.iter().map(|t| t[a]).sum::<f64>() / k).collect();
    let base_vec = base.theta_hat.to_vec();
    let mut corrected: Vec<f64> = (0..d).map(|a| 2.0 * base_vec[a] - mean[a]).collect();
    if cfg.tau_fixed.is_some() {
        corrected[d - 1] = base_vec[d - 1];
    }

    let mut result = FitResult {
        method: Method::Rr2,
        ..base
    };
    if ok.len() < bootstrap_reps {
        result.warnings.push(FitWarning::BootstrapFailures {
            failed: bootstrap_reps - ok.len(),
            requested: bootstrap_reps,
        });
    }
    let (lo, hi) = result.tau_bracket_used;
    if corrected[d - 1] < lo || corrected[d - 1] > hi {
        corrected[d - 1] = corrected[d - 1].clamp(lo, hi);
        result.warnings.push(FitWarning::TauClamped);
    }
    result.theta_hat = ThetaParams::from_slice(&corrected);
    if cfg.compute_variance {
        let cov = nalgebra::DMatrix::from_fn(d, d, |a, b| {
            ok.iter().map(|t| (t[a] - mean[a]) * (t[b] - mean[b])).sum::<f64>() / (k - 1.0).max(1.0)
        });
        result.covariance = Some(matrix_rows(&cov));
    }
    Ok(result)
}

/// Runs `method` with its configuration taken from `cfg`.
pub fn fit_method(method: Method, cohort: &Cohort, model: &MeasurementModel, cfg: &FitConfig) -> Result<FitResult> {
    match method {
        Method::Naive => fit_naive(cohort, cfg),
        Method::Rc1 => fit_rc1(cohort, model, cfg),
        Method::Rc2 => fit_rc2(cohort, model, cfg),
        Method::Rr1 => fit_rr1(cohort, model, cfg),
        Method::Rr2 => fit_rr2(cohort, model, cfg, cfg.bootstrap_reps),
        Method::Mpple => crate::mpple::fit_mpple(cohort, model, cfg),
        Method::Simex => crate::simex::fit_simex(cohort, model, &cfg.simex, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survcore::{build_cohort, SubjectRecord};
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    /// Exponential survival under the changepoint model, censored at 1.
    pub(crate) fn simulate(seed: u64, n: usize, beta: f64, omega: f64, tau: f64, su: f64) -> Cohort {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_cohort(
            (0..n)
                .map(|_| {
                    let x: f64 = rng.sample(StandardNormal);
                    let u: f64 = rng.sample(StandardNormal);
                    let rate = 0.6 * (beta * x + omega * (x - tau).max(0.0)).exp();
                    let t = -rng.random::<f64>().ln() / rate;
                    SubjectRecord::new(t.min(1.0), t < 1.0, x + su * u)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn naive_recovers_truth_without_error() {
        let c = simulate(1, 3000, 0.405, 0.693, 0.0, 0.0);
        let fit = fit_naive(&c, &FitConfig::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.theta_hat.beta - 0.405).abs() < 0.25);
        assert!((fit.theta_hat.omega - 0.693).abs() < 0.35);
        assert!(fit.theta_hat.tau.abs() < 0.6);
        let (lo, hi) = fit.tau_bracket_used;
        assert!(fit.theta_hat.tau >= lo && fit.theta_hat.tau <= hi);
        let cov = fit.covariance_matrix().unwrap();
        assert!((&cov - cov.transpose()).amax() < 1e-12);
        assert!(cov.diagonal().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn psi_score_vanishes_at_fit() {
        let c = simulate(2, 800, 0.405, 0.693, 0.0, 0.6);
        let m = MeasurementModel::new(0.0, vec![], 0.64, 0.36).unwrap();
        for fit in [
            fit_naive(&c, &FitConfig::default()).unwrap(),
            fit_rc1(&c, &m, &FitConfig::default()).unwrap(),
        ] {
            let g = if fit.method == Method::Naive {
                SubstitutionPair::naive(&c)
            } else {
                SubstitutionPair::rc1(&c, &m)
            };
            let u = evaluate(&c, &g, &fit.theta_hat.to_vec(), Order::Gradient, 20.0)
                .unwrap()
                .score;
            assert!(u.rows(0, 2).norm() < 1e-8);
        }
    }

    #[test]
    fn methods_agree_without_measurement_error() {
        let c = simulate(3, 1000, 0.405, 0.693, 0.0, 0.0);
        let m = MeasurementModel::error_free(1.0);
        let cfg = FitConfig::default().without_variance();
        let naive = fit_naive(&c, &cfg).unwrap().theta_hat.to_vec();
        let rc1 = fit_rc1(&c, &m, &cfg).unwrap().theta_hat.to_vec();
        let rr1 = fit_rr1(&c, &m, &cfg).unwrap().theta_hat.to_vec();
        for k in 0..3 {
            assert_relative_eq!(naive[k], rc1[k], epsilon = 1e-8);
            assert_relative_eq!(naive[k], rr1[k], epsilon = 1e-8);
        }
        assert_eq!(fit_rc2(&c, &m, &cfg), Err(Error::DegenerateEta));
    }

    #[test]
    fn fixed_tau_is_reported_as_given() {
        let c = simulate(4, 600, 0.405, 0.693, 0.0, 0.6);
        let cfg = FitConfig {
            tau_fixed: Some(0.25),
            ..FitConfig::default()
        };
        let fit = fit_naive(&c, &cfg).unwrap();
        assert_eq!(fit.theta_hat.tau, 0.25);
        assert!(fit.tau_fixed);
        let cov = fit.covariance_matrix().unwrap();
        assert_eq!(cov[(2, 2)], 0.0);
        assert!(cov[(0, 0)] > 0.0);
    }

    #[test]
    fn degenerate_calibration_falls_back_to_w_bracket() {
        let c = simulate(5, 300, 0.405, 0.693, 0.0, 0.6);
        let mut m = MeasurementModel::new(0.0, vec![], 0.0, 1.0).unwrap();
        m.sigma_x2_clamped = true;
        let out = fit_substitution(
            Method::Rc1,
            &c,
            SubstitutionPair::rc1(&c, &m),
            Some(&m),
            &FitConfig::default(),
        );
        // the calibrated covariate is constant, so β is not identified
        assert_eq!(out.unwrap_err(), Error::SingularInformation);
        let mut w = Vec::new();
        let b = bracket_with_fallback(&calibrated(&c, &m), &c, 0.05, &mut w).unwrap();
        assert_eq!(w, vec![FitWarning::DegenerateCalibration]);
        assert_eq!(b, tau_bracket(&c.surrogates(), 0.05).unwrap());
    }

    #[test]
    fn monotone_likelihood_does_not_converge() {
        // events occur in order of decreasing w, so risk rises without bound in w
        let recs = (0..30)
            .map(|i| SubjectRecord::new(1.0 + i as f64, true, 3.0 - 0.2 * i as f64))
            .collect();
        let c = build_cohort(recs).unwrap();
        let cfg = FitConfig {
            tau_fixed: Some(0.0),
            ..FitConfig::default()
        };
        let out = fit_substitution(Method::Naive, &c, SubstitutionPair::naive(&c), None, &cfg).unwrap();
        assert!(!out.converged);
        assert!(matches!(fit_naive(&c, &cfg), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn rr2_is_deterministic_and_corrects() {
        let c = simulate(6, 400, 0.405, 0.693, 0.0, 0.6);
        let m = MeasurementModel::new(0.0, vec![], 0.64, 0.36).unwrap();
        let cfg = FitConfig::default();
        let a = fit_rr2(&c, &m, &cfg, 6).unwrap();
        let b = fit_rr2(&c, &m, &cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.method, Method::Rr2);
        assert!(a.covariance.is_some());
    }

    #[test]
    fn serialization_round_trip() {
        let c = simulate(7, 300, 0.405, 0.693, 0.0, 0.6);
        let fit = fit_naive(&c, &FitConfig::default()).unwrap();
        let text = serde_json::to_string(&fit).unwrap();
        let back: FitResult = serde_json::from_str(&text).unwrap();
        assert_eq!(fit, back);
    }
}
