//! Additive normal measurement error `W = X + U`.
//!
//! Under joint normality `X | W, Z ~ N(μ, η²)` with
//! `μ = μ_x(z) + (σ_x²/σ_w²)(w − μ_x(z))` and `η² = σ_x² σ_u² / σ_w²`.
//! Every correction method consumes some closed-form moment of that posterior.

use crate::error::{Error, Result};
use crate::normal;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Nuisance parameters of the error model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub alpha0: f64,
    pub alpha1: Vec<f64>,
    pub sigma_x2: f64,
    pub sigma_u2: f64,
    pub sigma_w2: f64,
    /// Set when the ANOVA estimate of `σ_x²` was negative and clamped to zero.
    #[serde(default)]
    pub sigma_x2_clamped: bool,
}

impl MeasurementModel {
    pub fn new(alpha0: f64, alpha1: Vec<f64>, sigma_x2: f64, sigma_u2: f64) -> Result<Self> {
        let finite = alpha0.is_finite() && alpha1.iter().all(|a| a.is_finite());
        if !finite || !(sigma_x2 >= 0.0) || !(sigma_u2 >= 0.0) || !sigma_x2.is_finite() || !sigma_u2.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "measurement model needs finite alpha and non-negative variances, got sigma_x2={sigma_x2}, sigma_u2={sigma_u2}"
            )));
        }
        Ok(Self {
            alpha0,
            alpha1,
            sigma_x2,
            sigma_u2,
            sigma_w2: sigma_x2 + sigma_u2,
            sigma_x2_clamped: false,
        })
    }

    /// No measurement error: `W = X`.
    pub fn error_free(sigma_x2: f64) -> Self {
        Self::new(0.0, Vec::new(), sigma_x2, 0.0).expect("non-negative variance")
    }

    /// Builds the model from a calibration line `E[X|W] = a + bW` and `Var(X|W) = v`.
    ///
    /// The slope is the reliability ratio and `v = σ_x²(1 − b)`, which pins down
    /// every variance. A slope of one means no error (and then `v` must be zero).
    pub fn from_calibration_line(intercept: f64, slope: f64, var_x_given_w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&slope) || !(var_x_given_w >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "calibration slope must lie in [0, 1] and Var(X|W) must be non-negative (slope={slope}, var={var_x_given_w})"
            )));
        }
        if slope == 1.0 {
            if var_x_given_w != 0.0 {
                return Err(Error::InvalidConfig("slope 1 implies Var(X|W) = 0".into()));
            }
            // μ = w whatever α₀ is; any positive σ_x² gives the same posterior.
            return Self::new(intercept, Vec::new(), 1.0, 0.0);
        }
        if slope == 0.0 {
            return Self::new(intercept, Vec::new(), var_x_given_w, 0.0).map(|mut m| {
                // λ_rel = 0 needs σ_w² > σ_x² = 0 with the posterior spread carried by η.
                m.sigma_x2 = 0.0;
                m.sigma_u2 = var_x_given_w.max(f64::MIN_POSITIVE);
                m.sigma_w2 = m.sigma_u2;
                m
            });
        }
        let sigma_x2 = var_x_given_w / (1.0 - slope);
        let sigma_w2 = sigma_x2 / slope;
        let alpha0 = intercept / (1.0 - slope);
        Self::new(alpha0, Vec::new(), sigma_x2, sigma_w2 - sigma_x2)
    }

    /// `λ_rel = σ_x² / σ_w²`, taken as 1 when both vanish.
    pub fn reliability(&self) -> f64 {
        if self.sigma_w2 > 0.0 {
            self.sigma_x2 / self.sigma_w2
        } else {
            1.0
        }
    }

    /// Posterior standard deviation `η`.
    pub fn eta(&self) -> f64 {
        if self.sigma_w2 > 0.0 {
            (self.sigma_x2 * self.sigma_u2 / self.sigma_w2).sqrt()
        } else {
            0.0
        }
    }

    /// `μ_x(z) = α₀ + α₁ᵀz`; missing slopes count as zero.
    pub fn mu_x(&self, z: &[f64]) -> f64 {
        self.alpha0 + self.alpha1.iter().zip(z).map(|(a, z)| a * z).sum::<f64>()
    }

    pub fn cond_mean(&self, w: f64, z: &[f64]) -> f64 {
        let mx = self.mu_x(z);
        if self.sigma_w2 > 0.0 {
            mx + self.reliability() * (w - mx)
        } else {
            mx
        }
    }

    pub fn posterior(&self, w: f64, z: &[f64]) -> Posterior {
        Posterior {
            mu: self.cond_mean(w, z),
            eta: self.eta(),
        }
    }

    pub fn cond_expect_plus(&self, w: f64, z: &[f64], tau: f64) -> f64 {
        self.posterior(w, z).expect_plus(tau)
    }

    pub fn cond_expect_plus_dtau(&self, w: f64, z: &[f64], tau: f64) -> Result<f64> {
        self.posterior(w, z).expect_plus_dtau(tau)
    }

    /// `E[exp(βX + ω(X − τ)₊) | W = w, Z = z]`.
    pub fn induced_risk(&self, w: f64, z: &[f64], beta: f64, omega: f64, tau: f64, cap: f64) -> Result<f64> {
        let log = self.posterior(w, z).induced_log_risk(beta, omega, tau);
        if log.value.abs() > cap {
            return Err(Error::Overflow {
                exponent: log.value,
                cap,
            });
        }
        Ok(log.value.exp())
    }
}

/// `N(μ, η²)` law of `X` given the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mu: f64,
    pub eta: f64,
}

/// Log of the induced relative risk with derivatives in `(β, ω, τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InducedLogRisk {
    pub value: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Posterior {
    /// `E[(X − τ)₊]`.
    pub fn expect_plus(&self, tau: f64) -> f64 {
        let diff = self.mu - tau;
        if self.eta == 0.0 {
            return diff.max(0.0);
        }
        let d = diff / self.eta;
        diff * normal::cdf(d) + self.eta * normal::pdf(d)
    }

    /// `∂E[(X − τ)₊]/∂τ = −Φ((μ − τ)/η)`.
    pub fn expect_plus_dtau(&self, tau: f64) -> Result<f64> {
        if self.eta == 0.0 {
            return Err(Error::DegenerateEta);
        }
        Ok(-normal::cdf((self.mu - tau) / self.eta))
    }

    /// `∂²E[(X − τ)₊]/∂τ² = φ((μ − τ)/η)/η`.
    pub fn expect_plus_d2tau(&self, tau: f64) -> Result<f64> {
        if self.eta == 0.0 {
            return Err(Error::DegenerateEta);
        }
        Ok(normal::pdf((self.mu - tau) / self.eta) / self.eta)
    }

    /// Log of `E[exp(βX + ω(X − τ)₊)]`, split at `τ` and completed to the square.
    pub fn induced_log_risk(&self, beta: f64, omega: f64, tau: f64) -> InducedLogRisk {
        let (mu, eta) = (self.mu, self.eta);
        if eta == 0.0 {
            let above = mu > tau;
            let plus = (mu - tau).max(0.0);
            let mut hess = [[0.0; 3]; 3];
            if above {
                hess[1][2] = -1.0;
                hess[2][1] = -1.0;
            }
            return InducedLogRisk {
                value: beta * mu + omega * plus,
                grad: [mu, plus, if above { -omega } else { 0.0 }],
                hess,
            };
        }
        let eta2 = eta * eta;
        let kappa = beta + omega;
        let a_a = mu + beta * eta2;
        let a_b = mu + kappa * eta2;
        let z_a = (tau - a_a) / eta;
        let z_b = (tau - a_b) / eta;

        let (ln_phi_a, ln_phi_b) = (normal::ln_cdf(z_a), normal::ln_cdf(-z_b));
        let log_a = beta * mu + 0.5 * beta * beta * eta2 + ln_phi_a;
        let log_b = -omega * tau + kappa * mu + 0.5 * kappa * kappa * eta2 + ln_phi_b;
        let value = log_sum_exp(log_a, log_b);
        let pa = (log_a - value).exp();
        let pb = (log_b - value).exp();

        // truncated moments of the exponentially tilted posterior on each side of τ
        let lam_a = (normal::ln_pdf(z_a) - ln_phi_a).exp();
        let lam_b = (normal::ln_pdf(z_b) - ln_phi_b).exp();
        let m1a = a_a - eta * lam_a;
        let m2a = a_a * a_a + eta2 - eta * (a_a + tau) * lam_a;
        let m1b = a_b + eta * lam_b;
        let m2b = a_b * a_b + eta2 + eta * (a_b + tau) * lam_b;

        // ∇R/R and ∇²R/R in (β, ω, τ)
        let g = [pa * m1a + pb * m1b, pb * (m1b - tau), -omega * pb];
        let r_bb = pa * m2a + pb * m2b;
        let r_bw = pb * (m2b - tau * m1b);
        let r_ww = pb * (m2b - 2.0 * tau * m1b + tau * tau);
        let r_bt = -omega * pb * m1b;
        let r_wt = -omega * pb * (m1b - tau) - pb;
        let r_tt = omega * omega * pb + omega * pa * lam_a / eta;
        let second = [[r_bb, r_bw, r_bt], [r_bw, r_ww, r_wt], [r_bt, r_wt, r_tt]];
        let mut hess = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                hess[i][j] = second[i][j] - g[i] * g[j];
            }
        }
        InducedLogRisk { value, grad: g, hess }
    }
}

/// Replicate readings of the surrogate on an external sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityStudy {
    /// One row per person; rows may be ragged.
    pub measurements: Vec<Vec<f64>>,
    /// Optional error-free covariates per person, enabling an estimate of `α₁`.
    #[serde(default)]
    pub covariates: Option<Vec<Vec<f64>>>,
}

impl ReliabilityStudy {
    pub fn new(measurements: Vec<Vec<f64>>) -> Self {
        Self {
            measurements,
            covariates: None,
        }
    }
}

/// One-way random-effects ANOVA estimate of the nuisance parameters.
///
/// With covariates the person means are first regressed on `(1, z)` (weighted by
/// replicate counts) and the between-person mean square is taken on residuals.
pub fn estimate_nuisance(study: &ReliabilityStudy) -> Result<MeasurementModel> {
    let rows: Vec<(usize, Vec<f64>)> = study
        .measurements
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.iter().copied().filter(|v| v.is_finite()).collect::<Vec<_>>()))
        .collect();
    if let Some((row, _)) = rows.iter().find(|(_, r)| r.is_empty()) {
        return Err(Error::MalformedRecord {
            row: *row,
            reason: "replicate row has no finite reading".into(),
        });
    }
    let k = rows.len();
    if k < 2 || !rows.iter().any(|(_, r)| r.len() >= 2) {
        return Err(Error::Unidentifiable);
    }

    let counts: Vec<f64> = rows.iter().map(|(_, r)| r.len() as f64).collect();
    let means: Vec<f64> = rows
        .iter()
        .map(|(_, r)| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    let total: f64 = counts.iter().sum();
    let grand = rows.iter().flat_map(|(_, r)| r.iter()).sum::<f64>() / total;

    let ss_within: f64 = rows
        .iter()
        .zip(&means)
        .map(|((_, r), m)| r.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let ms_within = ss_within / (total - k as f64);

    let (alpha0, alpha1, fitted) = match &study.covariates {
        Some(z) if z.first().is_some_and(|r| !r.is_empty()) => {
            if z.len() != k {
                return Err(Error::InvalidConfig(
                    "reliability covariates must have one row per person".into(),
                ));
            }
            let p = z[0].len();
            let design = DMatrix::from_fn(k, p + 1, |i, j| if j == 0 { 1.0 } else { z[i][j - 1] });
            let weights = DVector::from_column_slice(&counts);
            let y = DVector::from_column_slice(&means);
            let xtw = design.transpose() * DMatrix::from_diagonal(&weights);
            let coef = (&xtw * &design)
                .cholesky()
                .ok_or(Error::SingularInformation)?
                .solve(&(&xtw * y));
            let fitted: Vec<f64> = (&design * &coef).iter().copied().collect();
            (coef[0], coef.iter().skip(1).copied().collect(), fitted)
        }
        _ => (grand, Vec::new(), vec![grand; k]),
    };
    let p = alpha1.len();
    let df_between = (k - 1 - p) as f64;
    if df_between <= 0.0 {
        return Err(Error::Unidentifiable);
    }
    let ss_between: f64 = counts
        .iter()
        .zip(&means)
        .zip(&fitted)
        .map(|((n, m), f)| n * (m - f).powi(2))
        .sum();
    let ms_between = ss_between / df_between;
    let m0 = (total - counts.iter().map(|n| n * n).sum::<f64>() / total) / (k - 1) as f64;

    let raw = (ms_between - ms_within) / m0;
    let mut model = MeasurementModel::new(alpha0, alpha1, raw.max(0.0), ms_within)?;
    model.sigma_x2_clamped = raw < 0.0;
    Ok(model)
}
