//! Sandwich covariance `Λ̂⁻¹ Ĉ Λ̂⁻ᵀ / n`.
//!
//! `Ĉ` is the empirical second moment of per-subject influence terms
//! `Ψ̃̃ᵢ = δᵢ[ξᵢ − S⁽¹⁾/S⁽⁰⁾](Tᵢ) − ∫ Yᵢ(t) eᵢ [ξᵢ − S⁽¹⁾/S⁽⁰⁾](t) dΛ̂(t)`, the
//! counting-process score residual minus its compensator. `Λ̂` is the
//! derivative of the mean score: analytic for objectives smooth in `τ`, and a
//! numerical Jacobian with a smoothed `τ` step when the score jumps in `τ`.

use crate::error::{Error, Result};
use crate::pl_engine::{evaluate, event_aggregates, Order, RiskModel, SubstitutionPair};
use crate::survcore::Cohort;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct SandwichParts {
    /// `−n⁻¹ ∂U/∂θ` over the active coordinates.
    pub lambda_hat: DMatrix<f64>,
    /// `n⁻¹ Σ Ψ̃̃ᵢ⊗²` over the active coordinates.
    pub c_hat: DMatrix<f64>,
    /// Full `(p+3)×(p+3)` covariance, zero outside the active block.
    pub covariance: DMatrix<f64>,
    /// Step used for the `τ` column of `Λ̂` when it was differenced numerically.
    pub tau_step: Option<f64>,
}

/// Per-subject influence terms `Ψ̃̃ᵢ`, one row per subject.
pub fn influence_terms<M: RiskModel + ?Sized>(
    cohort: &Cohort,
    model: &M,
    theta: &[f64],
    cap: f64,
) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let n = cohort.len();
    let (aggs, risk, grad) = event_aggregates(cohort, model, theta, cap)?;

    // ascending cumulative compensator sums per stratum
    let n_strata = cohort.strata.len();
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); n_strata];
    let mut cum0: Vec<Vec<f64>> = vec![vec![0.0]; n_strata];
    let mut cum1: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; d]]; n_strata];
    let mut mean_at: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_strata];
    for agg in aggs.iter().rev() {
        let s = agg.stratum;
        let m = agg.count as f64;
        times[s].push(agg.time);
        let last0 = *cum0[s].last().unwrap();
        cum0[s].push(last0 + m / agg.s0);
        let mut next = cum1[s].last().unwrap().clone();
        for a in 0..d {
            next[a] += m * agg.s1[a] / (agg.s0 * agg.s0);
        }
        cum1[s].push(next);
        mean_at[s].push(agg.s1.iter().map(|v| v / agg.s0).collect());
    }
    let label_index = |label: Option<i64>| cohort.strata.iter().position(|st| st.label == label).unwrap();

    let mut out = DMatrix::zeros(n, d);
    for (i, subj) in cohort.subjects().iter().enumerate() {
        let s = label_index(subj.stratum);
        let ts = &times[s];
        let xi = &grad[i * d..(i + 1) * d];
        // event times in [entry, followup]
        let lo = ts.partition_point(|&t| t < subj.entry_time);
        let hi = ts.partition_point(|&t| t <= subj.followup_time);
        let a0 = cum0[s][hi] - cum0[s][lo];
        for a in 0..d {
            let a1 = cum1[s][hi][a] - cum1[s][lo][a];
            out[(i, a)] = -risk[i] * (xi[a] * a0 - a1);
        }
        if subj.event {
            let k = ts.partition_point(|&t| t < subj.followup_time);
            for a in 0..d {
                out[(i, a)] += xi[a] - mean_at[s][k][a];
            }
        }
    }
    Ok(out)
}

fn restrict(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// Assembles the sandwich from an unnormalized `−∂U/∂θ`.
pub fn sandwich_from_jacobian<M: RiskModel + ?Sized>(
    cohort: &Cohort,
    model: &M,
    theta: &[f64],
    neg_jacobian: &DMatrix<f64>,
    active: &[usize],
    cap: f64,
) -> Result<SandwichParts> {
    let n = cohort.len() as f64;
    let d = theta.len();
    let psi = influence_terms(cohort, model, theta, cap)?;
    let psi_active = DMatrix::from_fn(psi.nrows(), active.len(), |i, a| psi[(i, active[a])]);
    let c_hat = psi_active.transpose() * &psi_active / n;
    let lambda_hat = restrict(neg_jacobian, active) / n;
    let inv = lambda_hat.clone().try_inverse().ok_or(Error::SingularLambda)?;
    let mut cov = &inv * &c_hat * inv.transpose() / n;
    cov = (&cov + cov.transpose()) * 0.5;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularLambda);
    }
    let mut covariance = DMatrix::zeros(d, d);
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            covariance[(i, j)] = cov[(a, b)];
        }
    }
    Ok(SandwichParts {
        lambda_hat,
        c_hat,
        covariance,
        tau_step: None,
    })
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Sandwich for the naive and RC1 fits, whose score is a step function of `τ`.
///
/// The `ψ` columns of `Λ̂` are central differences with a relative step of
/// `1e−5`; the `τ` column uses `sd(g₁)·d^{−1/5}` (with `d` the number of
/// events), which smooths the jumps of the empirical score into an estimate of
/// the slope of its limit.
pub fn sandwich_naive_rc1(
    cohort: &Cohort,
    theta: &[f64],
    g: &SubstitutionPair,
    active: &[usize],
    cap: f64,
) -> Result<SandwichParts> {
    let d = theta.len();
    let tau_idx = d - 1;
    let tau_step = sample_sd(g.g1()) * (cohort.event_count().max(1) as f64).powf(-0.2);
    let mut jac = DMatrix::zeros(d, d);
    for &k in active {
        let h = if k == tau_idx {
            tau_step
        } else {
            (1e-5 * theta[k].abs()).max(1e-5)
        };
        let mut up = theta.to_vec();
        let mut dn = theta.to_vec();
        up[k] += h;
        dn[k] -= h;
        let su = evaluate(cohort, g, &up, Order::Gradient, f64::INFINITY)?.score;
        let sd = evaluate(cohort, g, &dn, Order::Gradient, f64::INFINITY)?.score;
        let col: DVector<f64> = -(su - sd) / (2.0 * h);
        jac.set_column(k, &col);
    }
    let mut parts = sandwich_from_jacobian(cohort, g, theta, &jac, active, cap)?;
    if active.contains(&tau_idx) {
        parts.tau_step = Some(tau_step);
    }
    Ok(parts)
}

/// Sandwich for fits smooth in `τ` (RC2 and RR1), with `Λ̂` the analytic negative Hessian.
pub fn sandwich_rc2<M: RiskModel + ?Sized>(
    cohort: &Cohort,
    theta: &[f64],
    model: &M,
    active: &[usize],
    cap: f64,
) -> Result<SandwichParts> {
    let ev = evaluate(cohort, model, theta, Order::Hessian, cap)?;
    sandwich_from_jacobian(cohort, model, theta, &ev.neg_hessian, active, cap).map_err(|e| match e {
        Error::SingularLambda => Error::SingularInformation,
        other => other,
    })
}
