//! Monte Carlo harness: cohort generation, replicated fits and bias tables.
//!
//! `X ~ N(0, ρ²)` and `U` has variance `1 − ρ²`, so `Var W = 1` and the
//! correlation of `X` and `W` is `ρ`. Survival times are exponential given `X`
//! with a constant baseline hazard tuned so that a fraction
//! `cumulative_incidence` of subjects fail before administrative censoring.

use crate::error::{Error, Result};
use crate::estimators::{fit_method, FitConfig, FitResult, Method};
use crate::melib::{estimate_nuisance, MeasurementModel, ReliabilityStudy};
use crate::normal;
use crate::pl_engine::{parameter_names, ThetaParams};
use crate::quadrature::Legendre;
use crate::survcore::{build_cohort, Cohort, SubjectRecord};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ErrorLaw {
    Normal,
    /// Student t rescaled to variance `σᵤ²`; needs `df > 2`.
    StudentT {
        df: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NuisanceMode {
    Known,
    /// Nuisance estimated from an external replicate study drawn each replication.
    Estimated {
        subjects: usize,
        replicates: usize,
    },
}

impl NuisanceMode {
    pub fn estimated() -> Self {
        NuisanceMode::Estimated {
            subjects: 500,
            replicates: 2,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            NuisanceMode::Known => "kn",
            NuisanceMode::Estimated { .. } => "ukn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimScenario {
    pub label: String,
    pub n: usize,
    pub cumulative_incidence: f64,
    pub rho_xw: f64,
    pub theta_true: ThetaParams,
    pub replications: usize,
    pub error_law: ErrorLaw,
    pub nuisance_mode: NuisanceMode,
    pub seed: u64,
    /// Administrative censoring time.
    pub censor_time: f64,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            label: "common".into(),
            n: 3000,
            cumulative_incidence: 0.5,
            rho_xw: 0.8,
            theta_true: ThetaParams::new(vec![], 1.5f64.ln(), 2.0f64.ln(), 0.0),
            replications: 200,
            error_law: ErrorLaw::Normal,
            nuisance_mode: NuisanceMode::Known,
            seed: 20_180_101,
            censor_time: 1.0,
        }
    }
}

impl SimScenario {
    pub fn sigma_x2(&self) -> f64 {
        self.rho_xw * self.rho_xw
    }

    pub fn sigma_u2(&self) -> f64 {
        1.0 - self.sigma_x2()
    }

    /// The error model with the true nuisance values.
    pub fn true_model(&self) -> MeasurementModel {
        if self.sigma_u2() <= 0.0 {
            MeasurementModel::error_free(self.sigma_x2())
        } else {
            MeasurementModel::new(0.0, vec![], self.sigma_x2(), self.sigma_u2()).expect("validated scenario")
        }
    }

    /// Rare-disease cells skip MPPLE and SIMEX unless forced.
    pub fn is_rare(&self) -> bool {
        self.cumulative_incidence < 0.05
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scenario '{}': {m}", self.label)));
        if self.n < 10 {
            return bad("n must be at least 10");
        }
        if !(self.cumulative_incidence > 0.0 && self.cumulative_incidence < 1.0) {
            return bad("cumulative_incidence must lie in (0, 1)");
        }
        if !(self.rho_xw > 0.0 && self.rho_xw <= 1.0) {
            return bad("rho_xw must lie in (0, 1]");
        }
        if !self.theta_true.gamma.is_empty() {
            return bad("simulated cohorts carry no extra covariates");
        }
        if self.replications == 0 {
            return bad("replications must be positive");
        }
        if !(self.censor_time > 0.0) {
            return bad("censor_time must be positive");
        }
        if let ErrorLaw::StudentT { df } = self.error_law {
            if !(df > 2.0) {
                return bad("Student t errors need df > 2");
            }
        }
        if let NuisanceMode::Estimated { subjects, replicates } = self.nuisance_mode {
            if subjects < 2 || replicates < 2 {
                return bad("a replicate study needs at least 2 subjects with 2 readings");
            }
        }
        Ok(())
    }
}

/// Probability of an event before `censor_time` under baseline hazard `lambda0`.
pub fn incidence(scenario: &SimScenario, lambda0: f64) -> f64 {
    let sx = scenario.sigma_x2().sqrt();
    let th = &scenario.theta_true;
    let rule = Legendre::new(64);
    let (lo, hi) = (-10.0 * sx, 10.0 * sx);
    let f = |x: f64| {
        let risk = (th.beta * x + th.omega * (x - th.tau).max(0.0)).exp();
        -(-lambda0 * scenario.censor_time * risk).exp_m1() * normal::pdf(x / sx) / sx
    };
    let k = th.tau.clamp(lo, hi);
    rule.integrate(lo, k, f) + rule.integrate(k, hi, f)
}

/// Baseline hazard matching the scenario's incidence, by bisection on `log λ₀`.
pub fn calibrate_baseline(scenario: &SimScenario) -> Result<f64> {
    let target = scenario.cumulative_incidence;
    let (mut lo, mut hi) = (-30.0f64, 15.0f64);
    if incidence(scenario, lo.exp()) > target || incidence(scenario, hi.exp()) < target {
        return Err(Error::CalibrationFailure { target });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if incidence(scenario, mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub cohort: Cohort,
    pub true_x: Vec<f64>,
    pub reliability: Option<ReliabilityStudy>,
}

fn draw_error<R: Rng>(law: ErrorLaw, sd: f64, rng: &mut R) -> f64 {
    match law {
        ErrorLaw::Normal => {
            let e: f64 = StandardNormal.sample(rng);
            sd * e
        }
        ErrorLaw::StudentT { df } => {
            let t = StudentT::new(df).expect("validated df").sample(rng);
            sd * t * ((df - 2.0) / df).sqrt()
        }
    }
}

/// One cohort (and replicate study, when the nuisance is estimated).
pub fn generate_cohort(scenario: &SimScenario, seed: u64) -> Result<SimulatedData> {
    scenario.validate()?;
    let lambda0 = calibrate_baseline(scenario)?;
    generate_with_baseline(scenario, lambda0, seed)
}

fn generate_with_baseline(scenario: &SimScenario, lambda0: f64, seed: u64) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sx = scenario.sigma_x2().sqrt();
    let su = scenario.sigma_u2().max(0.0).sqrt();
    let th = &scenario.theta_true;
    let mut true_x = Vec::with_capacity(scenario.n);
    let mut records = Vec::with_capacity(scenario.n);
    for _ in 0..scenario.n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = sx * z;
        let w = if su > 0.0 {
            x + draw_error(scenario.error_law, su, &mut rng)
        } else {
            x
        };
        let rate = lambda0 * (th.beta * x + th.omega * (x - th.tau).max(0.0)).exp();
        let u: f64 = rng.random();
        let t = -(1.0 - u).ln() / rate;
        let event = t <= scenario.censor_time;
        records.push(SubjectRecord::new(t.min(scenario.censor_time), event, w));
        true_x.push(x);
    }
    let reliability = match scenario.nuisance_mode {
        NuisanceMode::Known => None,
        NuisanceMode::Estimated { subjects, replicates } => Some(ReliabilityStudy::new(
            (0..subjects)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let x = sx * z;
                    (0..replicates)
                        .map(|_| x + draw_error(scenario.error_law, su, &mut rng))
                        .collect()
                })
                .collect(),
        )),
    };
    Ok(SimulatedData {
        cohort: build_cohort(records)?,
        true_x,
        reliability,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub fit: FitConfig,
    /// Run MPPLE and SIMEX in rare-disease cells too.
    pub force_heavy: bool,
    /// Also fit the naive model to the true covariate.
    pub benchmark: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default().without_variance(),
            force_heavy: false,
            benchmark: true,
        }
    }
}

/// One estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub replication: usize,
    pub estimator: String,
    pub theta: Option<ThetaParams>,
    pub standard_errors: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub estimator: String,
    pub parameter: String,
    pub true_value: f64,
    pub median: f64,
    /// `(median − true)/true`, or `median − true` when the true value is zero.
    pub bias: f64,
    pub relative: bool,
    /// Monte Carlo standard error of `bias`, from the large-sample median variance.
    pub mc_se: f64,
    pub empirical_sd: f64,
    pub convergence_pct: f64,
    pub converged: usize,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub scenario: SimScenario,
    pub estimators: Vec<String>,
    pub cells: Vec<CellSummary>,
    /// Estimators not run, with the reason.
    pub skipped: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub table: BiasTable,
    pub replicates: Vec<ReplicateFit>,
    pub empirical_incidence: f64,
}

pub const ERROR_FREE: &str = "error_free";

fn estimator_label(method: Method, mode: NuisanceMode) -> String {
    if method.needs_nuisance() {
        format!("{}({})", method.label(), mode.suffix())
    } else {
        method.label().to_string()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}

/// Per-replication seeds: data, bootstrap and SIMEX streams keyed by counter.
fn replication_seeds(master: u64, rep: usize) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep as u64 + 1);
    [rng.next_u64(), rng.next_u64(), rng.next_u64()]
}

/// Runs every requested estimator on `scenario.replications` simulated cohorts.
pub fn run_scenario(scenario: &SimScenario, methods: &[Method], config: &HarnessConfig) -> Result<ScenarioRun> {
    scenario.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    let lambda0 = calibrate_baseline(scenario)?;
    let mut skipped = Vec::new();
    let mut run: Vec<Method> = Vec::new();
    for &m in methods {
        if run.contains(&m) {
            continue;
        }
        if scenario.is_rare() && !config.force_heavy && matches!(m, Method::Mpple | Method::Simex) {
            skipped.push((m.label().to_string(), "skipped in rare-disease cells".to_string()));
        } else if scenario.sigma_u2() <= 0.0 && matches!(m, Method::Rc2 | Method::Mpple) {
            skipped.push((m.label().to_string(), "undefined without measurement error".to_string()));
        } else {
            run.push(m);
        }
    }
    let mut labels: Vec<String> = run
        .iter()
        .map(|&m| estimator_label(m, scenario.nuisance_mode))
        .collect();
    if config.benchmark {
        labels.push(ERROR_FREE.to_string());
    }

    let per_rep: Vec<Result<(Vec<ReplicateFit>, usize)>> = (0..scenario.replications)
        .into_par_iter()
        .map(|rep| {
            let [data_seed, boot_seed, simex_seed] = replication_seeds(scenario.seed, rep);
            let data = generate_with_baseline(scenario, lambda0, data_seed)?;
            let mut cfg = config.fit.clone();
            cfg.seed = boot_seed;
            cfg.simex.seed = simex_seed;
            let model = match &data.reliability {
                None => Ok(scenario.true_model()),
                Some(study) => estimate_nuisance(study),
            };
            let mut fits = Vec::with_capacity(labels.len());
            for (&m, label) in run.iter().zip(&labels) {
                let out = match &model {
                    Ok(model) => fit_method(m, &data.cohort, model, &cfg),
                    Err(e) if !m.needs_nuisance() => {
                        fit_method(m, &data.cohort, &scenario.true_model(), &cfg).map_err(|_| e.clone())
                    }
                    Err(e) => Err(e.clone()),
                };
                fits.push(record(rep, label, out));
            }
            if config.benchmark {
                let exact = data.cohort.with_surrogates(&data.true_x)?;
                fits.push(record(rep, ERROR_FREE, crate::estimators::fit_naive(&exact, &cfg)));
            }
            Ok((fits, data.cohort.event_count()))
        })
        .collect();
    let mut replicates = Vec::new();
    let mut events = 0;
    for r in per_rep {
        let (fits, e) = r?;
        replicates.extend(fits);
        events += e;
    }
    let empirical_incidence = events as f64 / (scenario.n * scenario.replications) as f64;
    let table = summarize(scenario, &labels, &replicates, skipped);
    Ok(ScenarioRun {
        table,
        replicates,
        empirical_incidence,
    })
}

fn record(rep: usize, label: &str, out: Result<FitResult>) -> ReplicateFit {
    match out {
        Ok(f) => ReplicateFit {
            replication: rep,
            estimator: label.to_string(),
            standard_errors: f.standard_errors(),
            theta: Some(f.theta_hat),
            error: None,
        },
        Err(e) => ReplicateFit {
            replication: rep,
            estimator: label.to_string(),
            theta: None,
            standard_errors: None,
            error: Some(e.to_string()),
        },
    }
}

/// Median bias per estimator and parameter over the converged replications.
pub fn summarize(
    scenario: &SimScenario,
    labels: &[String],
    replicates: &[ReplicateFit],
    skipped: Vec<(String, String)>,
) -> BiasTable {
    let truth = scenario.theta_true.to_vec();
    let names = parameter_names(scenario.theta_true.p());
    let mut cells = Vec::new();
    for label in labels {
        let rows: Vec<&ReplicateFit> = replicates.iter().filter(|r| &r.estimator == label).collect();
        let ok: Vec<Vec<f64>> = rows
            .iter()
            .filter_map(|r| r.theta.as_ref().map(|t| t.to_vec()))
            .collect();
        let total = rows.len();
        for (k, name) in names.iter().enumerate() {
            let mut v: Vec<f64> = ok.iter().map(|t| t[k]).collect();
            v.sort_by(f64::total_cmp);
            let k_ok = v.len();
            let (med, sd) = if k_ok == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let mean = v.iter().sum::<f64>() / k_ok as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k_ok as f64 - 1.0).max(1.0);
                (median(&v), var.sqrt())
            };
            let t = truth[k];
            let relative = t != 0.0;
            let scale = if relative { t.abs() } else { 1.0 };
            let bias = if relative { (med - t) / t } else { med - t };
            let mc_se = (std::f64::consts::PI / 2.0).sqrt() * sd / (k_ok.max(1) as f64).sqrt() / scale;
            cells.push(CellSummary {
                estimator: label.clone(),
                parameter: name.clone(),
                true_value: t,
                median: med,
                bias,
                relative,
                mc_se,
                empirical_sd: sd,
                convergence_pct: if total == 0 {
                    0.0
                } else {
                    100.0 * k_ok as f64 / total as f64
                },
                converged: k_ok,
                replications: total,
            });
        }
    }
    BiasTable {
        scenario: scenario.clone(),
        estimators: labels.to_vec(),
        cells,
        skipped,
    }
}

impl BiasTable {
    pub fn cell(&self, estimator: &str, parameter: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.parameter == parameter)
    }

    fn parameters(&self) -> Vec<String> {
        parameter_names(self.scenario.theta_true.p())
    }

    /// One row per parameter and one column per estimator, as in the published tables.
    pub fn to_wide_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "scenario".to_string(),
            "tau".into(),
            "incidence".into(),
            "rho_xw".into(),
            "parameter".into(),
        ];
        header.extend(self.estimators.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        let s = &self.scenario;
        for p in self.parameters() {
            let mut row = vec![
                s.label.clone(),
                s.theta_true.tau.to_string(),
                s.cumulative_incidence.to_string(),
                s.rho_xw.to_string(),
                p.clone(),
            ];
            for e in &self.estimators {
                row.push(self.cell(e, &p).map(|c| format!("{:.3}", c.bias)).unwrap_or_default());
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Every cell with its Monte Carlo error and convergence percent.
    pub fn to_long_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario",
            "tau",
            "incidence",
            "rho_xw",
            "estimator",
            "parameter",
            "true",
            "median",
            "bias",
            "bias_kind",
            "mc_se",
            "empirical_sd",
            "pct",
            "converged",
            "replications",
        ])
        .expect("in-memory write");
        let s = &self.scenario;
        for c in &self.cells {
            w.write_record([
                s.label.clone(),
                s.theta_true.tau.to_string(),
                s.cumulative_incidence.to_string(),
                s.rho_xw.to_string(),
                c.estimator.clone(),
                c.parameter.clone(),
                c.true_value.to_string(),
                c.median.to_string(),
                c.bias.to_string(),
                if c.relative {
                    "relative".into()
                } else {
                    "absolute".into()
                },
                c.mc_se.to_string(),
                c.empirical_sd.to_string(),
                format!("{:.1}", c.convergence_pct),
                c.converged.to_string(),
                c.replications.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Fixed-width text: bias with its Monte Carlo error, then convergence percent.
    pub fn to_text(&self) -> String {
        let s = &self.scenario;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}: n={} incidence={} rho_xw={} tau={:.3} reps={}",
            s.label, s.n, s.cumulative_incidence, s.rho_xw, s.theta_true.tau, s.replications
        );
        let _ = write!(out, "{:<12}", "estimator");
        for p in self.parameters() {
            let _ = write!(out, "{:>22}", p);
        }
        let _ = writeln!(out, "{:>8}", "pct");
        for e in &self.estimators {
            let _ = write!(out, "{:<12}", e);
            let mut pct = f64::NAN;
            for p in self.parameters() {
                if let Some(c) = self.cell(e, &p) {
                    let kind = if c.relative { ' ' } else { '*' };
                    let _ = write!(out, "{:>14.3}{kind}({:.3})", c.bias, c.mc_se);
                    pct = c.convergence_pct;
                }
            }
            let _ = writeln!(out, "{:>8.1}", pct);
        }
        for (e, why) in &self.skipped {
            let _ = writeln!(out, "{e}: {why}");
        }
        let _ = writeln!(
            out,
            "relative bias of the median; * marks absolute bias where the true value is 0"
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(reps: usize) -> SimScenario {
        SimScenario {
            n: 400,
            replications: reps,
            ..SimScenario::default()
        }
    }

    #[test]
    fn baseline_hits_target_incidence() {
        for (inc, tau) in [(0.5, 0.0), (0.01, -1.2816), (0.03, 0.674)] {
            let s = SimScenario {
                cumulative_incidence: inc,
                theta_true: ThetaParams::new(vec![], 0.405, 0.693, tau),
                ..SimScenario::default()
            };
            let l = calibrate_baseline(&s).unwrap();
            assert_relative_eq!(incidence(&s, l), inc, max_relative = 1e-9);
        }
    }

    #[test]
    fn incidence_matches_monte_carlo() {
        let s = SimScenario {
            n: 20_000,
            ..SimScenario::default()
        };
        let d = generate_cohort(&s, 4).unwrap();
        let frac = d.cohort.event_count() as f64 / s.n as f64;
        assert!((frac - 0.5).abs() < 0.015, "{frac}");
    }

    #[test]
    fn perfect_correlation_means_no_error() {
        let s = SimScenario {
            rho_xw: 1.0,
            n: 100,
            ..SimScenario::default()
        };
        let d = generate_cohort(&s, 1).unwrap();
        assert_eq!(d.cohort.surrogates(), d.true_x);
    }

    #[test]
    fn student_t_errors_have_matched_variance() {
        let s = SimScenario {
            n: 50_000,
            rho_xw: 0.6,
            error_law: ErrorLaw::StudentT { df: 15.0 },
            ..SimScenario::default()
        };
        let d = generate_cohort(&s, 2).unwrap();
        let u: Vec<f64> = d
            .cohort
            .surrogates()
            .iter()
            .zip(&d.true_x)
            .map(|(w, x)| w - x)
            .collect();
        let var = u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64;
        assert!((var / s.sigma_u2() - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn unreachable_incidence_is_reported() {
        let s = SimScenario {
            cumulative_incidence: 0.999_999_999_999,
            theta_true: ThetaParams::new(vec![], -3.0, 0.0, 0.0),
            ..SimScenario::default()
        };
        assert!(matches!(calibrate_baseline(&s), Err(Error::CalibrationFailure { .. })));
    }

    #[test]
    fn estimated_nuisance_draws_replicate_study() {
        let s = SimScenario {
            n: 100,
            nuisance_mode: NuisanceMode::estimated(),
            ..SimScenario::default()
        };
        let d = generate_cohort(&s, 3).unwrap();
        let study = d.reliability.unwrap();
        assert_eq!(study.measurements.len(), 500);
        let m = estimate_nuisance(&study).unwrap();
        assert!((m.sigma_u2 - 0.36).abs() < 0.08);
    }

    #[test]
    fn run_is_deterministic_and_tabulates() {
        let s = small(4);
        let cfg = HarnessConfig::default();
        let a = run_scenario(&s, &[Method::Naive, Method::Rc1], &cfg).unwrap();
        let b = run_scenario(&s, &[Method::Naive, Method::Rc1], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.table.estimators, vec!["naive", "rc1(kn)", ERROR_FREE]);
        let cell = a.table.cell("naive", "tau").unwrap();
        assert!(!cell.relative);
        assert!(a.table.cell("naive", "beta").unwrap().relative);
        assert!(cell.convergence_pct >= 0.0 && cell.convergence_pct <= 100.0);
        let wide = a.table.to_wide_csv();
        assert_eq!(wide.lines().count(), 4);
        assert!(a.table.to_long_csv().lines().count() == 1 + 3 * 3);
        assert!(a.table.to_text().contains("rc1(kn)"));
    }

    #[test]
    fn heavy_methods_skipped_in_rare_cells() {
        let s = SimScenario {
            n: 2000,
            cumulative_incidence: 0.02,
            replications: 1,
            ..SimScenario::default()
        };
        let cfg = HarnessConfig {
            benchmark: false,
            ..HarnessConfig::default()
        };
        let r = run_scenario(&s, &[Method::Naive, Method::Mpple], &cfg).unwrap();
        assert_eq!(r.table.estimators, vec!["naive"]);
        assert_eq!(r.table.skipped.len(), 1);
    }

    #[test]
    fn median_uses_converged_only() {
        let s = small(3);
        let fit = |rep, beta: Option<f64>| ReplicateFit {
            replication: rep,
            estimator: "naive".into(),
            theta: beta.map(|b| ThetaParams::new(vec![], b, 0.693, 0.0)),
            standard_errors: None,
            error: beta.is_none().then(|| "failed".into()),
        };
        let t = summarize(
            &s,
            &["naive".into()],
            &[fit(0, Some(0.2)), fit(1, Some(0.4)), fit(2, None)],
            vec![],
        );
        let c = t.cell("naive", "beta").unwrap();
        assert_relative_eq!(c.median, 0.3, epsilon = 1e-12);
        assert_relative_eq!(c.convergence_pct, 100.0 * 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(c.converged, 2);
    }
}
