//! Limiting bias of the substitution estimators.
//!
//! The limit `θ*` solves the expected score equation. The expectation is
//! replaced by the average over one very large simulated cohort, so `θ*` is the
//! fit on that cohort, started from `(β, ω) = (0, 0)` as every fit is. All
//! cells share the seed, which gives common random numbers across the grid.

use crate::error::{Error, Result};
use crate::estimators::{fit_method, FitConfig, Method};
use crate::normal;
use crate::pl_engine::ThetaParams;
use crate::simharness::{generate_cohort, BiasTable, SimScenario};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Methods with a limit computed by the atlas.
pub const ATLAS_METHODS: [Method; 4] = [Method::Naive, Method::Rc1, Method::Rc2, Method::Rr1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasConfig {
    /// Quantiles of the standard normal giving the true thresholds.
    pub tau_quantiles: Vec<f64>,
    pub rho_grid: Vec<f64>,
    pub methods: Vec<Method>,
    /// Size of the large cohort standing in for the population.
    pub cohort_size: usize,
    pub cumulative_incidence: f64,
    pub beta: f64,
    pub omega: f64,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        Self {
            tau_quantiles: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            rho_grid: vec![0.8, 0.6, 0.4],
            methods: ATLAS_METHODS.to_vec(),
            cohort_size: 50_000,
            cumulative_incidence: 0.01,
            beta: 1.5f64.ln(),
            omega: 2.0f64.ln(),
            seed: 20_180_101,
            fit: FitConfig::default(),
        }
    }
}

impl AtlasConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.methods.iter().find(|m| !ATLAS_METHODS.contains(m)) {
            return Err(Error::InvalidConfig(format!("no limiting-bias calculation for {m}")));
        }
        if self.tau_quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            return Err(Error::InvalidConfig("tau quantiles must lie in (0, 1)".into()));
        }
        if self.tau_quantiles.is_empty() || self.rho_grid.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidConfig("atlas grid is empty".into()));
        }
        Ok(())
    }

    fn scenario(&self, rho: f64, tau: f64) -> SimScenario {
        SimScenario {
            label: "atlas".into(),
            n: self.cohort_size,
            cumulative_incidence: self.cumulative_incidence,
            rho_xw: rho,
            theta_true: ThetaParams::new(vec![], self.beta, self.omega, tau),
            replications: 1,
            seed: self.seed,
            ..SimScenario::default()
        }
    }
}

/// Limit of one estimator in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitResult {
    pub method: Method,
    pub rho_xw: f64,
    pub tau_quantile: Option<f64>,
    pub theta_true: ThetaParams,
    /// `None` when the large-cohort fit failed.
    pub theta_star: Option<ThetaParams>,
    /// Standard errors of `θ*` as an estimate of the limit (from the sandwich).
    pub standard_errors: Option<Vec<f64>>,
    pub error: Option<String>,
}

impl LimitResult {
    /// `θ* − θ₀`.
    pub fn bias(&self) -> Option<Vec<f64>> {
        self.theta_star.as_ref().map(|t| {
            t.to_vec()
                .iter()
                .zip(self.theta_true.to_vec())
                .map(|(a, b)| a - b)
                .collect()
        })
    }

    /// Relative bias, or absolute where the true value is zero.
    pub fn scaled_bias(&self) -> Option<Vec<f64>> {
        let truth = self.theta_true.to_vec();
        self.bias().map(|b| {
            b.iter()
                .zip(&truth)
                .map(|(b, t)| if *t == 0.0 { *b } else { b / t.abs() })
                .collect()
        })
    }
}

/// `θ*` for one method on the scenario's large cohort (drawn with `scenario.seed`).
pub fn limit_theta(method: Method, scenario: &SimScenario, config: &FitConfig) -> Result<LimitResult> {
    if !ATLAS_METHODS.contains(&method) {
        return Err(Error::InvalidConfig(format!(
            "no limiting-bias calculation for {method}"
        )));
    }
    let data = generate_cohort(scenario, scenario.seed)?;
    Ok(limit_on(method, scenario, &data.cohort, None, config))
}

fn limit_on(
    method: Method,
    scenario: &SimScenario,
    cohort: &crate::survcore::Cohort,
    q: Option<f64>,
    cfg: &FitConfig,
) -> LimitResult {
    let fit = fit_method(method, cohort, &scenario.true_model(), cfg);
    let (theta_star, standard_errors, error) = match fit {
        Ok(f) => (Some(f.theta_hat.clone()), f.standard_errors(), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    LimitResult {
        method,
        rho_xw: scenario.rho_xw,
        tau_quantile: q,
        theta_true: scenario.theta_true.clone(),
        theta_star,
        standard_errors,
        error,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub config: AtlasConfig,
    pub cells: Vec<LimitResult>,
}

/// Computes the limit for every (method, ρ, τ) in the grid; cells run concurrently.
pub fn grid(config: &AtlasConfig) -> Result<Atlas> {
    config.validate()?;
    let settings: Vec<(f64, f64)> = config
        .rho_grid
        .iter()
        .flat_map(|&rho| config.tau_quantiles.iter().map(move |&q| (rho, q)))
        .collect();
    let cells: Vec<Result<Vec<LimitResult>>> = settings
        .par_iter()
        .map(|&(rho, q)| {
            let scenario = config.scenario(rho, normal::inv_cdf(q));
            let data = generate_cohort(&scenario, config.seed)?;
            Ok(config
                .methods
                .iter()
                .map(|&m| limit_on(m, &scenario, &data.cohort, Some(q), &config.fit))
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for c in cells {
        out.extend(c?);
    }
    Ok(Atlas {
        config: config.clone(),
        cells: out,
    })
}

const PARAMS: [&str; 3] = ["beta", "omega", "tau"];

/// One flagged comparison of RR1 against the naive limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub rho_xw: f64,
    pub tau_quantile: f64,
    pub parameter: String,
    pub rr1: f64,
    pub naive: f64,
    /// `|RR1| ≤ |naive| + one standard error`.
    pub holds: bool,
}

impl Atlas {
    pub fn cell(&self, method: Method, rho: f64, q: f64) -> Option<&LimitResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.rho_xw == rho && c.tau_quantile == Some(q))
    }

    /// RR1 against naive at interior thresholds, for `β` and `ω`.
    pub fn rr1_ordering(&self) -> Vec<OrderingCheck> {
        let mut out = Vec::new();
        for &rho in &self.config.rho_grid {
            for &q in self.config.tau_quantiles.iter().filter(|q| **q > 0.1 && **q < 0.9) {
                let (Some(rr), Some(nv)) = (self.cell(Method::Rr1, rho, q), self.cell(Method::Naive, rho, q)) else {
                    continue;
                };
                let (Some(b_rr), Some(b_nv)) = (rr.scaled_bias(), nv.scaled_bias()) else {
                    continue;
                };
                let se = rr.standard_errors.clone().unwrap_or_else(|| vec![0.0; 3]);
                let truth = rr.theta_true.to_vec();
                for k in 0..2 {
                    let tol = se[k] / if truth[k] == 0.0 { 1.0 } else { truth[k].abs() };
                    out.push(OrderingCheck {
                        rho_xw: rho,
                        tau_quantile: q,
                        parameter: PARAMS[k].into(),
                        rr1: b_rr[k],
                        naive: b_nv[k],
                        holds: b_rr[k].abs() <= b_nv[k].abs() + tol,
                    });
                }
            }
        }
        out
    }

    /// Layout of the theoretical-versus-empirical table: one row per method,
    /// ρ, τ and parameter. `empirical` supplies simulated bias tables to
    /// compare against; DELTA is theoretical minus empirical.
    pub fn to_csv(&self, empirical: &[BiasTable]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "rho_xw",
            "tau_quantile",
            "tau",
            "parameter",
            "theta_star",
            "theoretical",
            "empirical",
            "delta",
            "pct",
        ])
        .expect("in-memory write");
        for c in &self.cells {
            let scaled = c.scaled_bias();
            let truth = c.theta_true.to_vec();
            for (k, p) in PARAMS.iter().enumerate() {
                let theo = scaled.as_ref().map(|b| b[k]);
                let emp = empirical
                    .iter()
                    .find(|t| {
                        t.scenario.rho_xw == c.rho_xw && (t.scenario.theta_true.tau - c.theta_true.tau).abs() < 1e-9
                    })
                    .and_then(|t| {
                        t.cells.iter().find(|cell| {
                            cell.parameter == *p && cell.estimator.split('(').next() == Some(c.method.label())
                        })
                    });
                let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
                w.write_record([
                    c.method.label().to_string(),
                    c.rho_xw.to_string(),
                    c.tau_quantile.map(|q| q.to_string()).unwrap_or_default(),
                    format!("{:.4}", truth[2]),
                    p.to_string(),
                    fmt(c.theta_star.as_ref().map(|t| t.to_vec()[k])),
                    fmt(theo),
                    fmt(emp.map(|e| e.bias)),
                    fmt(theo.zip(emp).map(|(t, e)| t - e.bias)),
                    emp.map(|e| format!("{:.1}", e.convergence_pct)).unwrap_or_default(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "limiting bias, N={} incidence={} (relative; absolute for tau at 0)",
            self.config.cohort_size, self.config.cumulative_incidence
        );
        let _ = writeln!(
            out,
            "{:<7}{:>6}{:>8}{:>10}{:>10}{:>10}",
            "method", "rho", "q", "beta", "omega", "tau"
        );
        for c in &self.cells {
            let _ = write!(
                out,
                "{:<7}{:>6}{:>8}",
                c.method.label(),
                c.rho_xw,
                c.tau_quantile.unwrap_or(f64::NAN)
            );
            match c.scaled_bias() {
                Some(b) => {
                    let _ = writeln!(out, "{:>10.3}{:>10.3}{:>10.3}", b[0], b[1], b[2]);
                }
                None => {
                    let _ = writeln!(out, "  failed: {}", c.error.as_deref().unwrap_or(""));
                }
            }
        }
        out
    }
}
