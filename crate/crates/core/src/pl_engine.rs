//! Cox partial likelihood over a generic per-subject log relative risk.
//!
//! A [`RiskModel`] supplies `ℓᵢ(θ)`, its gradient `ξᵢ` and optionally its
//! Hessian. The engine sweeps each stratum once in descending time, keeping
//! running sums `S⁽⁰⁾ = Σ eʲ`, `S⁽¹⁾ = Σ eʲ ξⱼ`, `S⁽²⁾ = Σ eʲ ξⱼ⊗²` over the risk
//! set, and applies Breslow's convention to tied event times.

use crate::error::{Error, Result};
use crate::melib::{MeasurementModel, Posterior};
use crate::survcore::Cohort;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// `θ = (γ, β, ω, τ)`, stored flat as `[γ₁..γₚ, β, ω, τ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    pub gamma: Vec<f64>,
    pub beta: f64,
    pub omega: f64,
    pub tau: f64,
}

impl ThetaParams {
    pub fn new(gamma: Vec<f64>, beta: f64, omega: f64, tau: f64) -> Self {
        Self {
            gamma,
            beta,
            omega,
            tau,
        }
    }

    /// `γ = 0, β = ω = 0` at the given threshold.
    pub fn null(p: usize, tau: f64) -> Self {
        Self::new(vec![0.0; p], 0.0, 0.0, tau)
    }

    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    pub fn dim(&self) -> usize {
        self.gamma.len() + 3
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.gamma.clone();
        v.extend([self.beta, self.omega, self.tau]);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let p = v.len() - 3;
        Self::new(v[..p].to_vec(), v[p], v[p + 1], v[p + 2])
    }

    /// `ψ = (γ, β, ω)`.
    pub fn psi(&self) -> Vec<f64> {
        let mut v = self.gamma.clone();
        v.extend([self.beta, self.omega]);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }
}

/// Names of the `θ` components in order: `gamma1..gammap`, `beta`, `omega`, `tau`.
pub fn parameter_names(p: usize) -> Vec<String> {
    (1..=p)
        .map(|k| format!("gamma{k}"))
        .chain(["beta", "omega", "tau"].map(String::from))
        .collect()
}

/// Index of `β`, `ω` and `τ` in the flat vector for `p` error-free covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub p: usize,
}

impl Layout {
    pub fn beta(self) -> usize {
        self.p
    }
    pub fn omega(self) -> usize {
        self.p + 1
    }
    pub fn tau(self) -> usize {
        self.p + 2
    }
    pub fn dim(self) -> usize {
        self.p + 3
    }
    /// Indices of `ψ`.
    pub fn psi(self) -> Vec<usize> {
        (0..self.p + 2).collect()
    }
    pub fn all(self) -> Vec<usize> {
        (0..self.p + 3).collect()
    }
}

/// How many derivatives an evaluation needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

/// Per-subject log relative risk `ℓᵢ(θ)`.
pub trait RiskModel: Sync {
    /// Number of error-free covariates `p`.
    fn covariate_dim(&self) -> usize;

    /// Writes `∂ℓᵢ/∂θ` into `grad` and, when given, `∂²ℓᵢ/∂θ²` row-major into `hess`.
    fn log_risk(&self, i: usize, theta: &[f64], grad: &mut [f64], hess: Option<&mut [f64]>) -> f64;

    fn layout(&self) -> Layout {
        Layout {
            p: self.covariate_dim(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubstitutionKind {
    /// `g₁ = w`, `g₂ = (w − τ)₊`.
    Naive,
    /// `g₁ = E[X|W]`, `g₂ = (g₁ − τ)₊`.
    Rc1,
    /// `g₁ = E[X|W]`, `g₂ = E[(X − τ)₊|W]`.
    Rc2,
}

/// Substitution `(g₁, g₂)` for `(x, (x − τ)₊)` precomputed over a cohort.
#[derive(Debug, Clone)]
pub struct SubstitutionPair {
    kind: SubstitutionKind,
    p: usize,
    z: Vec<f64>,
    g1: Vec<f64>,
    eta: f64,
}

fn flat_covariates(cohort: &Cohort) -> Vec<f64> {
    cohort
        .subjects()
        .iter()
        .flat_map(|s| s.covariates.iter().copied())
        .collect()
}

impl SubstitutionPair {
    pub fn naive(cohort: &Cohort) -> Self {
        Self {
            kind: SubstitutionKind::Naive,
            p: cohort.covariate_dim(),
            z: flat_covariates(cohort),
            g1: cohort.surrogates(),
            eta: 0.0,
        }
    }

    pub fn rc1(cohort: &Cohort, model: &MeasurementModel) -> Self {
        Self {
            kind: SubstitutionKind::Rc1,
            g1: calibrated(cohort, model),
            ..Self::naive(cohort)
        }
    }

    pub fn rc2(cohort: &Cohort, model: &MeasurementModel) -> Result<Self> {
        let eta = model.eta();
        if eta <= 0.0 {
            return Err(Error::DegenerateEta);
        }
        Ok(Self {
            kind: SubstitutionKind::Rc2,
            g1: calibrated(cohort, model),
            eta,
            ..Self::naive(cohort)
        })
    }

    pub fn kind(&self) -> SubstitutionKind {
        self.kind
    }

    /// `g₁` for every subject.
    pub fn g1(&self) -> &[f64] {
        &self.g1
    }

    /// `g₂(τ)` for subject `i`.
    pub fn g2(&self, i: usize, tau: f64) -> f64 {
        match self.kind {
            SubstitutionKind::Rc2 => Posterior {
                mu: self.g1[i],
                eta: self.eta,
            }
            .expect_plus(tau),
            _ => (self.g1[i] - tau).max(0.0),
        }
    }

    /// Whether the objective is differentiable in `τ`.
    pub fn smooth_in_tau(&self) -> bool {
        self.kind == SubstitutionKind::Rc2
    }
}

/// `E[X | W, Z]` for every subject.
pub fn calibrated(cohort: &Cohort, model: &MeasurementModel) -> Vec<f64> {
    cohort
        .subjects()
        .iter()
        .map(|s| model.cond_mean(s.surrogate, &s.covariates))
        .collect()
}

impl RiskModel for SubstitutionPair {
    fn covariate_dim(&self) -> usize {
        self.p
    }

    fn log_risk(&self, i: usize, theta: &[f64], grad: &mut [f64], hess: Option<&mut [f64]>) -> f64 {
        let p = self.p;
        let z = &self.z[i * p..(i + 1) * p];
        let (beta, omega, tau) = (theta[p], theta[p + 1], theta[p + 2]);
        let g1 = self.g1[i];
        let (g2, g2_t, g2_tt) = match self.kind {
            SubstitutionKind::Rc2 => {
                let post = Posterior { mu: g1, eta: self.eta };
                let d = (g1 - tau) / self.eta;
                (
                    post.expect_plus(tau),
                    -crate::normal::cdf(d),
                    crate::normal::pdf(d) / self.eta,
                )
            }
            _ => {
                let above = g1 > tau;
                ((g1 - tau).max(0.0), if above { -1.0 } else { 0.0 }, 0.0)
            }
        };
        let mut lr = beta * g1 + omega * g2;
        for k in 0..p {
            lr += theta[k] * z[k];
            grad[k] = z[k];
        }
        grad[p] = g1;
        grad[p + 1] = g2;
        grad[p + 2] = omega * g2_t;
        if let Some(h) = hess {
            let d = p + 3;
            h.fill(0.0);
            h[(p + 1) * d + p + 2] = g2_t;
            h[(p + 2) * d + p + 1] = g2_t;
            h[(p + 2) * d + p + 2] = omega * g2_tt;
        }
        lr
    }
}

/// Relative risk `exp(γᵀz) E[exp(βX + ω(X − τ)₊) | W, Z]`.
#[derive(Debug, Clone)]
pub struct InducedRiskModel {
    p: usize,
    z: Vec<f64>,
    posteriors: Vec<Posterior>,
}

impl InducedRiskModel {
    pub fn new(cohort: &Cohort, model: &MeasurementModel) -> Self {
        Self {
            p: cohort.covariate_dim(),
            z: flat_covariates(cohort),
            posteriors: cohort
                .subjects()
                .iter()
                .map(|s| model.posterior(s.surrogate, &s.covariates))
                .collect(),
        }
    }

    pub fn posteriors(&self) -> &[Posterior] {
        &self.posteriors
    }
}

impl RiskModel for InducedRiskModel {
    fn covariate_dim(&self) -> usize {
        self.p
    }

    fn log_risk(&self, i: usize, theta: &[f64], grad: &mut [f64], hess: Option<&mut [f64]>) -> f64 {
        let p = self.p;
        let z = &self.z[i * p..(i + 1) * p];
        let ind = self.posteriors[i].induced_log_risk(theta[p], theta[p + 1], theta[p + 2]);
        let mut lr = ind.value;
        for k in 0..p {
            lr += theta[k] * z[k];
            grad[k] = z[k];
        }
        grad[p..p + 3].copy_from_slice(&ind.grad);
        if let Some(h) = hess {
            let d = p + 3;
            h.fill(0.0);
            for a in 0..3 {
                for b in 0..3 {
                    h[(p + a) * d + p + b] = ind.hess[a][b];
                }
            }
        }
        lr
    }
}

/// Objective and derivatives of the log partial likelihood at one `θ`.
#[derive(Debug, Clone)]
pub struct PlEvaluation {
    pub value: f64,
    /// `Σ δᵢ [ξᵢ − S⁽¹⁾/S⁽⁰⁾]`.
    pub score: DVector<f64>,
    /// `Σ [S⁽²⁾/S⁽⁰⁾ − (S⁽¹⁾/S⁽⁰⁾)⊗²]` over events.
    pub information: DMatrix<f64>,
    /// Exact negative Hessian; differs from `information` when `ℓᵢ` is nonlinear in `θ`.
    pub neg_hessian: DMatrix<f64>,
}

/// Per-subject terms evaluated once per `θ`.
pub(crate) struct SubjectTerms {
    pub d: usize,
    pub log_risk: Vec<f64>,
    pub risk: Vec<f64>,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl SubjectTerms {
    pub fn xi(&self, i: usize) -> &[f64] {
        &self.grad[i * self.d..(i + 1) * self.d]
    }
}

pub(crate) fn subject_terms<M: RiskModel + ?Sized>(
    cohort: &Cohort,
    model: &M,
    theta: &[f64],
    order: Order,
    cap: f64,
) -> Result<SubjectTerms> {
    let n = cohort.len();
    let d = model.layout().dim();
    let mut log_risk = vec![0.0; n];
    let mut grad = vec![0.0; n * d];
    let mut hess = if order == Order::Hessian {
        vec![0.0; n * d * d]
    } else {
        Vec::new()
    };
    for i in 0..n {
        let h = (order == Order::Hessian).then(|| &mut hess[i * d * d..(i + 1) * d * d]);
        let lr = model.log_risk(i, theta, &mut grad[i * d..(i + 1) * d], h);
        if !(lr.abs() <= cap) {
            return Err(Error::Overflow { exponent: lr, cap });
        }
        log_risk[i] = lr;
    }
    let risk = log_risk.iter().map(|l| l.exp()).collect();
    Ok(SubjectTerms {
        d,
        log_risk,
        risk,
        grad,
        hess,
    })
}

/// Risk-set sums at one distinct event time.
#[derive(Debug, Clone)]
pub struct EventAggregate {
    pub stratum: usize,
    pub time: f64,
    pub count: usize,
    pub s0: f64,
    pub s1: Vec<f64>,
}

/// Runs the descending sweep, calling `visit` at every event time with the
/// running `(S⁽⁰⁾, S⁽¹⁾, S⁽²⁾, Σ eʲ Hⱼ)` and the failing subjects.
fn sweep<F>(cohort: &Cohort, terms: &SubjectTerms, order: Order, mut visit: F) -> Result<()>
where
    F: FnMut(usize, f64, &[usize], f64, &[f64], &[f64], &[f64]),
{
    let d = terms.d;
    let want2 = order == Order::Hessian;
    for (si, st) in cohort.strata.iter().enumerate() {
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; d];
        let mut s2 = vec![0.0; if want2 { d * d } else { 0 }];
        let mut sh = vec![0.0; if want2 { d * d } else { 0 }];
        let mut size: isize = 0;
        let update = |i: usize, sign: f64, s0: &mut f64, s1: &mut [f64], s2: &mut [f64], sh: &mut [f64]| {
            let e = sign * terms.risk[i];
            *s0 += e;
            let xi = terms.xi(i);
            for a in 0..d {
                s1[a] += e * xi[a];
            }
            if want2 {
                let h = &terms.hess[i * d * d..(i + 1) * d * d];
                for a in 0..d {
                    for b in 0..d {
                        s2[a * d + b] += e * xi[a] * xi[b];
                        sh[a * d + b] += e * h[a * d + b];
                    }
                }
            }
        };
        for step in &st.steps {
            for &i in &st.add_order[step.add.clone()] {
                update(i, 1.0, &mut s0, &mut s1, &mut s2, &mut sh);
                size += 1;
            }
            for &i in &st.remove_order[step.remove.clone()] {
                update(i, -1.0, &mut s0, &mut s1, &mut s2, &mut sh);
                size -= 1;
            }
            if size <= 0 || !(s0 > 0.0) {
                return Err(Error::EmptyRiskSet { time: step.time });
            }
            visit(si, step.time, &st.event_members[step.events.clone()], s0, &s1, &s2, &sh);
        }
    }
    Ok(())
}

pub(crate) fn evaluate_terms(cohort: &Cohort, terms: &SubjectTerms, order: Order) -> Result<PlEvaluation> {
    let d = terms.d;
    let mut value = 0.0;
    let mut score = DVector::zeros(d);
    let mut info = DMatrix::zeros(d, d);
    let mut neg_h = DMatrix::zeros(d, d);
    sweep(cohort, terms, order, |_, _, events, s0, s1, s2, sh| {
        let m = events.len() as f64;
        for &i in events {
            value += terms.log_risk[i];
        }
        value -= m * s0.ln();
        if order == Order::Value {
            return;
        }
        for &i in events {
            let xi = terms.xi(i);
            for a in 0..d {
                score[a] += xi[a];
            }
        }
        for a in 0..d {
            score[a] -= m * s1[a] / s0;
        }
        if order == Order::Hessian {
            for a in 0..d {
                for b in 0..d {
                    let v = m * (s2[a * d + b] / s0 - s1[a] * s1[b] / (s0 * s0));
                    info[(a, b)] += v;
                    neg_h[(a, b)] += v + m * sh[a * d + b] / s0;
                }
            }
            for &i in events {
                let h = &terms.hess[i * d * d..(i + 1) * d * d];
                for a in 0..d {
                    for b in 0..d {
                        neg_h[(a, b)] -= h[a * d + b];
                    }
                }
            }
        }
    })?;
    Ok(PlEvaluation {
        value,
        score,
        information: info,
        neg_hessian: neg_h,
    })
}

/// Evaluates the log partial likelihood and, depending on `order`, its derivatives.
pub fn evaluate<M: RiskModel + ?Sized>(
    cohort: &Cohort,
    model: &M,
    theta: &[f64],
    order: Order,
    cap: f64,
) -> Result<PlEvaluation> {
    let terms = subject_terms(cohort, model, theta, order, cap)?;
    evaluate_terms(cohort, &terms, order)
}

/// Default bound on `|ℓᵢ|`.
pub const EXPONENT_CAP: f64 = 20.0;

pub fn log_partial_likelihood<M: RiskModel + ?Sized>(cohort: &Cohort, model: &M, theta: &ThetaParams) -> Result<f64> {
    Ok(evaluate(cohort, model, &theta.to_vec(), Order::Value, EXPONENT_CAP)?.value)
}

pub fn score<M: RiskModel + ?Sized>(cohort: &Cohort, model: &M, theta: &ThetaParams) -> Result<DVector<f64>> {
    Ok(evaluate(cohort, model, &theta.to_vec(), Order::Gradient, EXPONENT_CAP)?.score)
}

pub fn information<M: RiskModel + ?Sized>(cohort: &Cohort, model: &M, theta: &ThetaParams) -> Result<DMatrix<f64>> {
    Ok(evaluate(cohort, model, &theta.to_vec(), Order::Hessian, EXPONENT_CAP)?.information)
}

/// `S⁽⁰⁾` and `S⁽¹⁾` at every event time, in sweep order.
pub fn event_aggregates<M: RiskModel + ?Sized>(
    cohort: &Cohort,
    model: &M,
    theta: &[f64],
    cap: f64,
) -> Result<(Vec<EventAggregate>, Vec<f64>, Vec<f64>)> {
    let terms = subject_terms(cohort, model, theta, Order::Gradient, cap)?;
    let mut out = Vec::new();
    sweep(cohort, &terms, Order::Gradient, |si, t, events, s0, s1, _, _| {
        out.push(EventAggregate {
            stratum: si,
            time: t,
            count: events.len(),
            s0,
            s1: s1.to_vec(),
        });
    })?;
    Ok((out, terms.risk, terms.grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survcore::{build_cohort, risk_set, SubjectRecord};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cohort(rng: &mut ChaCha8Rng, n: usize, p: usize, truncated: bool) -> Cohort {
        let records = (0..n)
            .map(|_| {
                let t: f64 = rng.random_range(0.1..5.0);
                let entry = if truncated { rng.random_range(0.0..t) } else { 0.0 };
                SubjectRecord {
                    entry_time: entry,
                    followup_time: t,
                    event: rng.random_bool(0.7),
                    surrogate: rng.random_range(-2.0..2.0),
                    covariates: (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    stratum: None,
                }
            })
            .collect();
        build_cohort(records).unwrap()
    }

    /// Straight-line partial likelihood over direct risk sets.
    fn brute_force(cohort: &Cohort, model: &dyn RiskModel, theta: &[f64]) -> f64 {
        let d = theta.len();
        let mut g = vec![0.0; d];
        let lr: Vec<f64> = (0..cohort.len())
            .map(|i| model.log_risk(i, theta, &mut g, None))
            .collect();
        cohort
            .subjects()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.event)
            .map(|(i, s)| {
                let denom: f64 = risk_set(cohort, s.followup_time, s.stratum)
                    .into_iter()
                    .map(|j| lr[j].exp())
                    .sum();
                lr[i] - denom.ln()
            })
            .sum()
    }

    fn models(cohort: &Cohort) -> Vec<Box<dyn RiskModel>> {
        let m = MeasurementModel::new(0.1, vec![], 0.64, 0.36).unwrap();
        vec![
            Box::new(SubstitutionPair::naive(cohort)),
            Box::new(SubstitutionPair::rc1(cohort, &m)),
            Box::new(SubstitutionPair::rc2(cohort, &m).unwrap()),
            Box::new(InducedRiskModel::new(cohort, &m)),
        ]
    }

    #[test]
    fn single_subject_objective_is_zero() {
        let c = build_cohort(vec![SubjectRecord::new(2.0, true, 0.7)]).unwrap();
        let g = SubstitutionPair::naive(&c);
        let v = log_partial_likelihood(&c, &g, &ThetaParams::new(vec![], 0.4, 0.7, 0.1)).unwrap();
        assert!(v.abs() < 1e-15);
        let info = information(&c, &g, &ThetaParams::new(vec![], 0.4, 0.7, 0.1)).unwrap();
        assert!(info.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn null_model_is_minus_log_risk_set_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cohort(&mut rng, 30, 1, true);
        let g = SubstitutionPair::naive(&c);
        let v = log_partial_likelihood(&c, &g, &ThetaParams::null(1, 0.0)).unwrap();
        let expect: f64 = c
            .subjects()
            .iter()
            .filter(|s| s.event)
            .map(|s| -(risk_set(&c, s.followup_time, None).len() as f64).ln())
            .sum();
        assert_relative_eq!(v, expect, max_relative = 1e-12);
    }

    #[test]
    fn five_subject_hand_cohort_matches_brute_force() {
        let rows = [
            (0.0, 1.0, true, -0.5),
            (0.0, 2.0, true, 0.3),
            (0.5, 2.5, false, 1.2),
            (0.0, 3.0, true, 0.8),
            (1.0, 4.0, true, -1.1),
        ];
        let c = build_cohort(
            rows.iter()
                .map(|&(e, t, d, w)| SubjectRecord {
                    entry_time: e,
                    ..SubjectRecord::new(t, d, w)
                })
                .collect(),
        )
        .unwrap();
        let g = SubstitutionPair::naive(&c);
        let theta = [0.405, 0.693, 0.0];
        // hand-expanded: risk sets {0,1,2,3,4} (entry 1.0 counts at t = 1), {1,2,3,4}, {3,4}, {4}
        let lr = |w: f64| 0.405 * w + 0.693 * w.max(0.0);
        let s = |ids: &[usize]| ids.iter().map(|&i| lr(rows[i].3).exp()).sum::<f64>().ln();
        let hand =
            lr(-0.5) - s(&[0, 1, 2, 3, 4]) + lr(0.3) - s(&[1, 2, 3, 4]) + lr(0.8) - s(&[3, 4]) + lr(-1.1) - s(&[4]);
        let v = evaluate(&c, &g, &theta, Order::Value, 20.0).unwrap().value;
        assert_relative_eq!(v, hand, max_relative = 1e-13);
        assert_relative_eq!(v, brute_force(&c, &g, &theta), max_relative = 1e-13);
    }

    #[test]
    fn sweep_matches_brute_force_with_truncation_and_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = random_cohort(&mut rng, 60, 2, true);
        let recs: Vec<SubjectRecord> = c
            .subjects()
            .iter()
            .enumerate()
            .map(|(i, s)| SubjectRecord {
                stratum: Some((i % 3) as i64),
                ..s.clone()
            })
            .collect();
        c = build_cohort(recs).unwrap();
        let theta = [0.3, -0.2, 0.5, 0.4, 0.2];
        for m in models(&c) {
            let v = evaluate(&c, m.as_ref(), &theta, Order::Value, 20.0).unwrap().value;
            assert_relative_eq!(v, brute_force(&c, m.as_ref(), &theta), max_relative = 1e-12);
        }
    }

    #[test]
    fn breslow_ties() {
        let c = build_cohort(vec![
            SubjectRecord::new(1.0, true, 0.0),
            SubjectRecord::new(1.0, true, 1.0),
            SubjectRecord::new(2.0, false, 2.0),
        ])
        .unwrap();
        let g = SubstitutionPair::naive(&c);
        let v = evaluate(&c, &g, &[0.5, 0.0, 0.0], Order::Value, 20.0).unwrap().value;
        let s0 = 1.0 + 0.5f64.exp() + 1.0f64.exp();
        assert_relative_eq!(v, 0.5 - 2.0 * s0.ln(), max_relative = 1e-14);
    }

    fn fd_check(c: &Cohort, m: &dyn RiskModel, theta: &[f64], coords: &[usize]) {
        let ev = evaluate(c, m, theta, Order::Hessian, 20.0).unwrap();
        for &k in coords {
            let h = 1e-5;
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[k] += h;
            dn[k] -= h;
            let fu = evaluate(c, m, &up, Order::Gradient, 20.0).unwrap();
            let fd = evaluate(c, m, &dn, Order::Gradient, 20.0).unwrap();
            let grad = (fu.value - fd.value) / (2.0 * h);
            let scale = ev.score[k].abs().max(1.0);
            assert!(
                (grad - ev.score[k]).abs() < 1e-6 * scale,
                "score {k}: fd {grad} vs {}",
                ev.score[k]
            );
            for &j in coords {
                let hess = -(fu.score[j] - fd.score[j]) / (2.0 * h);
                let scale = ev.neg_hessian[(j, k)].abs().max(1.0);
                assert!(
                    (hess - ev.neg_hessian[(j, k)]).abs() < 1e-5 * scale,
                    "hessian ({j},{k}): fd {hess} vs {}",
                    ev.neg_hessian[(j, k)]
                );
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let truncated = rng.random_bool(0.5);
            let c = random_cohort(&mut rng, 50, 1, truncated);
            let theta = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let ms = models(&c);
            // naive and RC1: the ψ block only, τ sits between kinks almost surely
            fd_check(&c, ms[0].as_ref(), &theta, &[0, 1, 2]);
            fd_check(&c, ms[1].as_ref(), &theta, &[0, 1, 2]);
            fd_check(&c, ms[2].as_ref(), &theta, &[0, 1, 2, 3]);
            fd_check(&c, ms[3].as_ref(), &theta, &[0, 1, 2, 3]);
        }
    }

    #[test]
    fn naive_tau_score_is_the_xi_form() {
        // between kinks the naive objective's τ-derivative equals the ξ-based score
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_cohort(&mut rng, 40, 0, false);
        let g = SubstitutionPair::naive(&c);
        let theta = [0.3, 0.8, 0.1234];
        let ev = evaluate(&c, &g, &theta, Order::Gradient, 20.0).unwrap();
        let h = 1e-9;
        let up = evaluate(&c, &g, &[0.3, 0.8, 0.1234 + h], Order::Value, 20.0)
            .unwrap()
            .value;
        let dn = evaluate(&c, &g, &[0.3, 0.8, 0.1234 - h], Order::Value, 20.0)
            .unwrap()
            .value;
        assert_relative_eq!((up - dn) / (2.0 * h), ev.score[2], max_relative = 1e-5);
    }

    #[test]
    fn null_score_beta_is_observed_minus_risk_set_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_cohort(&mut rng, 25, 0, true);
        let g = SubstitutionPair::naive(&c);
        let u = score(&c, &g, &ThetaParams::null(0, 0.0)).unwrap();
        let w = c.surrogates();
        let expect: f64 = c
            .subjects()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.event)
            .map(|(i, s)| {
                let set = risk_set(&c, s.followup_time, None);
                w[i] - set.iter().map(|&j| w[j]).sum::<f64>() / set.len() as f64
            })
            .sum();
        assert_relative_eq!(u[0], expect, max_relative = 1e-12);
    }

    #[test]
    fn overflow_is_reported() {
        let c = build_cohort(vec![
            SubjectRecord::new(1.0, true, 30.0),
            SubjectRecord::new(2.0, true, 0.0),
        ])
        .unwrap();
        let g = SubstitutionPair::naive(&c);
        assert!(matches!(
            evaluate(&c, &g, &[1.0, 0.0, 0.0], Order::Value, 20.0),
            Err(Error::Overflow { .. })
        ));
    }

    proptest! {
        #[test]
        fn information_symmetric_and_psd(seed in 0u64..500, b in -1.0f64..1.0, o in -1.0f64..1.0, t in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cohort(&mut rng, 30, 1, true);
            for m in models(&c) {
                let ev = evaluate(&c, m.as_ref(), &[0.2, b, o, t], Order::Hessian, 20.0).unwrap();
                let asym = (&ev.information - ev.information.transpose()).amax();
                prop_assert!(asym < 1e-12);
                let eig = ev.information.clone().symmetric_eigen().eigenvalues;
                prop_assert!(eig.min() > -1e-9);
            }
        }

        #[test]
        fn objective_invariant_to_subject_order_and_time_shift(seed in 0u64..500, shift in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cohort(&mut rng, 30, 1, true);
            let theta = [0.2, 0.4, 0.6, 0.1];
            let base = evaluate(&c, &SubstitutionPair::naive(&c), &theta, Order::Value, 20.0).unwrap().value;
            let mut recs: Vec<SubjectRecord> = c.subjects().iter().rev().cloned().collect();
            for r in &mut recs {
                r.entry_time += shift;
                r.followup_time += shift;
            }
            let c2 = build_cohort(recs).unwrap();
            let v = evaluate(&c2, &SubstitutionPair::naive(&c2), &theta, Order::Value, 20.0).unwrap().value;
            prop_assert!((v - base).abs() < 1e-10 * base.abs().max(1.0));
        }

        #[test]
        fn objective_flat_in_tau_when_omega_zero(seed in 0u64..500, t1 in -2.0f64..2.0, t2 in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cohort(&mut rng, 30, 0, false);
            for m in models(&c) {
                let a = evaluate(&c, m.as_ref(), &[0.5, 0.0, t1], Order::Value, 20.0).unwrap().value;
                let b = evaluate(&c, m.as_ref(), &[0.5, 0.0, t2], Order::Value, 20.0).unwrap().value;
                prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn concave_in_psi_for_substitution_models(seed in 0u64..500, t in -1.5f64..1.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cohort(&mut rng, 30, 1, false);
            let m = MeasurementModel::new(0.0, vec![], 0.64, 0.36).unwrap();
            let g = SubstitutionPair::rc2(&c, &m).unwrap();
            let a = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            for s in [0.0, 0.3, 0.7, 1.0] {
                let th = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2]), t];
                let ev = evaluate(&c, &g, &th, Order::Hessian, 20.0).unwrap();
                let block = ev.neg_hessian.view((0, 0), (3, 3)).clone_owned();
                prop_assert!(block.symmetric_eigen().eigenvalues.min() > -1e-9);
            }
        }
    }
}
