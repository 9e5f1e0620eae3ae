//! Maximum pseudo-partial likelihood.
//!
//! Given `W`, the hazard at time `t` is `λ₀(t) exp(φ̃(θ, v, Λ₀(t)))` with
//!
//! ```text
//! φ̃(θ, v, c) = log E[ψ e^{−cψ} | W, Z] − log E[e^{−cψ} | W, Z],
//! ψ(x) = exp(γᵀz + βx + ω(x − τ)₊),
//! ```
//!
//! the expectation taken over the `N(μ, η²)` posterior of `X`. Both integrals
//! are split at `τ` where `ψ` has a kink. `Λ₀` is replaced by a Breslow-type
//! estimate and the fit alternates between `Λ̂₀` and `θ`.
//!
//! Within one evaluation every subject's `φ̃` is needed at the cumulative
//! hazard of every event time in its risk set. Since `c ↦ exp φ̃(c)` is smooth,
//! it is interpolated on a Chebyshev grid in `c`: nodal values are summed over
//! the risk set during the sweep and combined with barycentric weights at each
//! event time, which keeps the cost at `O(n · nodes)` per evaluation.

use crate::error::{Error, Result};
use crate::estimators::{matrix_rows, profile_fit_with, FitConfig, FitResult, FitWarning, Method};
use crate::melib::{MeasurementModel, Posterior};
use crate::normal;
use crate::optimize::newton_with;
use crate::pl_engine::{event_aggregates, InducedRiskModel, Layout, Order, PlEvaluation, ThetaParams};
use crate::quadrature::Legendre;
use crate::survcore::Cohort;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MppleConfig {
    /// Gauss–Legendre nodes on each side of `τ` during fitting.
    pub quad_nodes: usize,
    /// Chebyshev nodes in `c`.
    pub cheb_nodes: usize,
    pub outer_max: usize,
    pub outer_tol: f64,
    /// Hold `Λ̂₀ ≡ 0`, which reduces the fit to RR1 up to quadrature error.
    pub force_zero_hazard: bool,
}

impl Default for MppleConfig {
    fn default() -> Self {
        Self {
            quad_nodes: 20,
            cheb_nodes: 16,
            outer_max: 25,
            outer_tol: 1e-6,
            force_zero_hazard: false,
        }
    }
}

/// Posterior half-width in units of `η`.
const HALF_WIDTH: f64 = 8.0;

/// Right-continuous step function `Λ̂₀(t) = Σ_{tₖ ≤ t} ΔΛₖ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub times: Vec<f64>,
    pub jumps: Vec<f64>,
}

impl BaselineHazard {
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        self.jumps[..k].iter().sum()
    }

    /// `Λ̂₀(t−)`.
    pub fn eval_left(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        self.jumps[..k].iter().sum()
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.jumps.iter().all(|&j| j >= 0.0)
    }
}

/// `φ̃` and (optionally) its gradient in `θ` by split Gauss–Legendre quadrature.
fn phi_tilde_eval(
    theta: &[f64],
    z: &[f64],
    post: Posterior,
    c: f64,
    rule: &Legendre,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let p = z.len();
    let (beta, omega, tau) = (theta[p], theta[p + 1], theta[p + 2]);
    let lin: f64 = theta[..p].iter().zip(z).map(|(g, z)| g * z).sum();
    let (mu, eta) = (post.mu, post.eta);
    let lo = mu - HALF_WIDTH * eta;
    let hi = mu + HALF_WIDTH * eta;
    let k = tau.clamp(lo, hi);

    let q = 2 * rule.len();
    let mut xs = Vec::with_capacity(q);
    let mut la = Vec::with_capacity(q);
    let mut ex = Vec::with_capacity(q);
    for (x, w) in rule.panel(lo, k).chain(rule.panel(k, hi)) {
        if w <= 0.0 {
            continue;
        }
        let e = lin + beta * x + omega * (x - tau).max(0.0);
        let psi = e.exp();
        xs.push(x);
        la.push(w.ln() + normal::ln_pdf((x - mu) / eta) - c * psi);
        ex.push(e);
    }
    let m2 = la.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m1 = la.iter().zip(&ex).map(|(a, e)| a + e).fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for (a, e) in la.iter().zip(&ex) {
        s1 += (a + e - m1).exp();
        s2 += (a - m2).exp();
    }
    let value = (m1 + s1.ln()) - (m2 + s2.ln());
    if !value.is_finite() {
        return Err(Error::QuadratureFailure);
    }
    if let Some(g) = grad {
        let d = p + 3;
        g[..d].fill(0.0);
        let mut dir = vec![0.0; d];
        for ((x, a), e) in xs.iter().zip(&la).zip(&ex) {
            let psi = e.exp();
            let t1 = (a + e - m1).exp() / s1;
            let t2 = (a - m2).exp() / s2;
            dir[..p].copy_from_slice(z);
            dir[p] = *x;
            dir[p + 1] = (x - tau).max(0.0);
            dir[p + 2] = if *x >= tau { -omega } else { 0.0 };
            // ∂ log I = E_I[D(1 − cψ)], ∂ log II = −c E_II[ψ D]
            let wgt = t1 * (1.0 - c * psi) + c * psi * t2;
            for a in 0..d {
                g[a] += wgt * dir[a];
            }
        }
        if g[..d].iter().any(|v| !v.is_finite()) {
            return Err(Error::QuadratureFailure);
        }
    }
    Ok(value)
}

fn check_eta(post: Posterior) -> Result<()> {
    if post.eta > 0.0 {
        Ok(())
    } else {
        Err(Error::DegenerateEta)
    }
}

/// `φ̃(θ, v, c)` with 40 Gauss–Legendre nodes on each side of `τ`.
pub fn phi_tilde(theta: &ThetaParams, z: &[f64], post: Posterior, c: f64) -> Result<f64> {
    check_eta(post)?;
    phi_tilde_eval(&theta.to_vec(), z, post, c, &Legendre::new(40), None)
}

/// Analytic gradient of [`phi_tilde`] in `θ = (γ, β, ω, τ)`.
pub fn phi_tilde_grad(theta: &ThetaParams, z: &[f64], post: Posterior, c: f64) -> Result<Vec<f64>> {
    check_eta(post)?;
    let mut g = vec![0.0; theta.dim()];
    phi_tilde_eval(&theta.to_vec(), z, post, c, &Legendre::new(40), Some(&mut g))?;
    Ok(g)
}

/// Chebyshev points of the second kind on `[0, c_max]` with barycentric weights.
#[derive(Debug, Clone)]
struct ChebGrid {
    nodes: Vec<f64>,
    bary: Vec<f64>,
}

impl ChebGrid {
    fn new(m: usize, c_max: f64) -> Self {
        let m = m.max(2);
        let nodes = (0..m)
            .map(|j| 0.5 * c_max * (1.0 - (std::f64::consts::PI * j as f64 / (m - 1) as f64).cos()))
            .collect();
        let bary = (0..m)
            .map(|j| {
                let s = if j % 2 == 0 { 1.0 } else { -1.0 };
                if j == 0 || j == m - 1 {
                    0.5 * s
                } else {
                    s
                }
            })
            .collect();
        Self { nodes, bary }
    }

    fn c_max(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    fn weights(&self, c: f64, out: &mut [f64]) {
        if let Some(j) = self.nodes.iter().position(|&x| x == c) {
            out.fill(0.0);
            out[j] = 1.0;
            return;
        }
        let mut total = 0.0;
        for (j, (x, b)) in self.nodes.iter().zip(&self.bary).enumerate() {
            out[j] = b / (c - x);
            total += out[j];
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }
}

/// Nodal values `exp φ̃ⱼ(c_m)` and `exp φ̃ⱼ(c_m) ∇φ̃ⱼ(c_m)`.
struct Nodal {
    r: Vec<f64>,
    g: Vec<f64>,
}

struct Problem<'a> {
    cohort: &'a Cohort,
    p: usize,
    z: Vec<f64>,
    post: Vec<Posterior>,
    rule: Legendre,
    grid: ChebGrid,
    cap: f64,
}

/// Per stratum, `Λ̂₀(tₖ−)` at each sweep step followed by `Λ̂₀` at the last event time.
type StepHazard = Vec<Vec<f64>>;

impl<'a> Problem<'a> {
    fn d(&self) -> usize {
        self.p + 3
    }

    fn nodal(&self, theta: &[f64], want_grad: bool) -> Result<Nodal> {
        let m = self.grid.nodes.len();
        let d = self.d();
        let n = self.cohort.len();
        let mut r = vec![0.0; n * m];
        let mut g = if want_grad { vec![0.0; n * m * d] } else { Vec::new() };
        let results: Vec<Result<()>> = if want_grad {
            r.par_chunks_mut(m)
                .zip(g.par_chunks_mut(m * d))
                .enumerate()
                .map(|(i, (ri, gi))| self.subject_nodes(i, theta, ri, Some(gi)))
                .collect()
        } else {
            r.par_chunks_mut(m)
                .enumerate()
                .map(|(i, ri)| self.subject_nodes(i, theta, ri, None))
                .collect()
        };
        results.into_iter().collect::<Result<Vec<()>>>()?;
        Ok(Nodal { r, g })
    }

    fn subject_nodes(&self, i: usize, theta: &[f64], r: &mut [f64], mut g: Option<&mut [f64]>) -> Result<()> {
        let d = self.d();
        let p = self.p;
        let z = &self.z[i * p..(i + 1) * p];
        let (beta, omega, tau) = (theta[p], theta[p + 1], theta[p + 2]);
        let lin: f64 = theta[..p].iter().zip(z).map(|(g, z)| g * z).sum();
        let post = self.post[i];
        let lo = post.mu - HALF_WIDTH * post.eta;
        let hi = post.mu + HALF_WIDTH * post.eta;
        let k = tau.clamp(lo, hi);

        // c-independent parts: log weight × density, exponent and ψ at each node
        let mut base = Vec::with_capacity(2 * self.rule.len());
        for (x, w) in self.rule.panel(lo, k).chain(self.rule.panel(k, hi)) {
            if w <= 0.0 {
                continue;
            }
            let e = lin + beta * x + omega * (x - tau).max(0.0);
            if e > 700.0 {
                return Err(Error::Overflow {
                    exponent: e,
                    cap: self.cap,
                });
            }
            base.push((x, w.ln() + normal::ln_pdf((x - post.mu) / post.eta), e, e.exp()));
        }
        let mut t2 = vec![0.0; base.len()];
        for (j, &c) in self.grid.nodes.iter().enumerate() {
            let m2 = base.iter().map(|b| b.1 - c * b.3).fold(f64::NEG_INFINITY, f64::max);
            let (mut s1, mut s2) = (0.0, 0.0);
            for (t, b) in t2.iter_mut().zip(&base) {
                *t = (b.1 - c * b.3 - m2).exp();
                s2 += *t;
                s1 += *t * b.3;
            }
            let log_r = s1.ln() - s2.ln();
            if j == 0 && log_r.abs() > self.cap {
                return Err(Error::Overflow {
                    exponent: log_r,
                    cap: self.cap,
                });
            }
            r[j] = log_r.exp();
            if !r[j].is_finite() {
                return Err(Error::QuadratureFailure);
            }
            if let Some(g) = g.as_deref_mut() {
                let gj = &mut g[j * d..(j + 1) * d];
                gj.fill(0.0);
                // E_I[D(1 − cψ)] + c E_II[ψD], where E_I weights nodes by t2·ψ
                for (t, b) in t2.iter().zip(&base) {
                    let psi = b.3;
                    let wgt = t * psi * ((1.0 - c * psi) / s1 + c / s2);
                    let x = b.0;
                    for a in 0..p {
                        gj[a] += wgt * z[a];
                    }
                    gj[p] += wgt * x;
                    if x >= tau {
                        gj[p + 1] += wgt * (x - tau);
                        gj[p + 2] -= wgt * omega;
                    }
                }
                for v in gj.iter_mut() {
                    *v *= r[j];
                }
            }
        }
        Ok(())
    }

    /// Risk-set sums of nodal values at every sweep step, per stratum.
    fn step_sums(&self, nodal: &Nodal, want_grad: bool) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
        let m = self.grid.nodes.len();
        let d = self.d();
        let w = if want_grad { m * d } else { 0 };
        self.cohort
            .strata
            .iter()
            .map(|st| {
                let mut n0 = vec![0.0; m];
                let mut n1 = vec![0.0; w];
                let mut out = Vec::with_capacity(st.steps.len());
                for step in &st.steps {
                    let moves = st.add_order[step.add.clone()]
                        .iter()
                        .map(|&i| (i, 1.0))
                        .chain(st.remove_order[step.remove.clone()].iter().map(|&i| (i, -1.0)));
                    for (i, sign) in moves {
                        for k in 0..m {
                            n0[k] += sign * nodal.r[i * m + k];
                        }
                        for k in 0..w {
                            n1[k] += sign * nodal.g[i * w + k];
                        }
                    }
                    out.push((n0.clone(), n1.clone()));
                }
                out
            })
            .collect()
    }

    /// Breslow forward recursion `ΔΛₖ = mₖ / S⁽⁰⁾(tₖ; Λ̂₀(tₖ−))`.
    fn breslow(&self, theta: &[f64]) -> Result<Option<StepHazard>> {
        let nodal = self.nodal(theta, false)?;
        let sums = self.step_sums(&nodal, false);
        let m = self.grid.nodes.len();
        let mut lw = vec![0.0; m];
        let mut out = Vec::new();
        for (st, st_sums) in self.cohort.strata.iter().zip(&sums) {
            let mut cs = vec![0.0; st.steps.len() + 1];
            let mut cum = 0.0;
            for (k, step) in st.steps.iter().enumerate().rev() {
                if cum > self.grid.c_max() * (1.0 + 1e-12) {
                    return Ok(None);
                }
                cs[k] = cum;
                self.grid.weights(cum, &mut lw);
                let s0: f64 = lw.iter().zip(&st_sums[k].0).map(|(a, b)| a * b).sum();
                if !(s0 > 0.0) {
                    return Err(Error::EmptyRiskSet { time: step.time });
                }
                cum += step.events.len() as f64 / s0;
            }
            cs[st.steps.len()] = cum;
            out.push(cs);
        }
        Ok(Some(out))
    }

    /// Pseudo partial likelihood at fixed `Λ̂₀`; the Hessian is a symmetrized
    /// central difference of the analytic gradient.
    fn evaluate(&self, theta: &[f64], hazard: &StepHazard, order: Order) -> Result<PlEvaluation> {
        let (value, score) = self.value_and_score(theta, hazard, order != Order::Value)?;
        let neg_h = if order == Order::Hessian {
            self.neg_hessian(theta, hazard, &(0..self.d()).collect::<Vec<_>>())?
        } else {
            DMatrix::zeros(self.d(), self.d())
        };
        Ok(PlEvaluation {
            value,
            score,
            information: absolute_floored(&neg_h),
            neg_hessian: neg_h,
        })
    }

    /// Central-difference `−∂²l/∂θ²` in the `active` columns, zero elsewhere.
    fn neg_hessian(&self, theta: &[f64], hazard: &StepHazard, active: &[usize]) -> Result<DMatrix<f64>> {
        let d = self.d();
        let mut neg_h = DMatrix::zeros(d, d);
        for &k in active {
            let h = 1e-5 * theta[k].abs().max(1.0);
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[k] += h;
            dn[k] -= h;
            let (_, su) = self.value_and_score(&up, hazard, true)?;
            let (_, sd) = self.value_and_score(&dn, hazard, true)?;
            neg_h.set_column(k, &(-(su - sd) / (2.0 * h)));
        }
        for &a in active {
            for &b in active {
                if a < b {
                    let v = 0.5 * (neg_h[(a, b)] + neg_h[(b, a)]);
                    neg_h[(a, b)] = v;
                    neg_h[(b, a)] = v;
                }
            }
        }
        for a in 0..d {
            if !active.contains(&a) {
                neg_h.row_mut(a).fill(0.0);
            }
        }
        Ok(neg_h)
    }

    fn value_and_score(&self, theta: &[f64], hazard: &StepHazard, want_grad: bool) -> Result<(f64, DVector<f64>)> {
        let d = self.d();
        let m = self.grid.nodes.len();
        let nodal = self.nodal(theta, want_grad)?;
        let sums = self.step_sums(&nodal, want_grad);
        let mut lw = vec![0.0; m];
        let mut value = 0.0;
        let mut score = DVector::zeros(d);
        for ((st, st_sums), cs) in self.cohort.strata.iter().zip(&sums).zip(hazard) {
            for (k, step) in st.steps.iter().enumerate() {
                self.grid.weights(cs[k], &mut lw);
                let (n0, n1) = &st_sums[k];
                let s0: f64 = lw.iter().zip(n0).map(|(a, b)| a * b).sum();
                if !(s0 > 0.0) {
                    return Err(Error::EmptyRiskSet { time: step.time });
                }
                let events = &st.event_members[step.events.clone()];
                let cnt = events.len() as f64;
                value -= cnt * s0.ln();
                for &i in events {
                    let ri: f64 = lw.iter().zip(&nodal.r[i * m..(i + 1) * m]).map(|(a, b)| a * b).sum();
                    if !(ri > 0.0) {
                        return Err(Error::QuadratureFailure);
                    }
                    value += ri.ln();
                    if want_grad {
                        for a in 0..d {
                            let gi: f64 = (0..m).map(|j| lw[j] * nodal.g[(i * m + j) * d + a]).sum();
                            score[a] += gi / ri;
                        }
                    }
                }
                if want_grad {
                    for a in 0..d {
                        let s1: f64 = (0..m).map(|j| lw[j] * n1[j * d + a]).sum();
                        score[a] -= cnt * s1 / s0;
                    }
                }
            }
        }
        Ok((value, score))
    }

    /// Influence terms with time-varying `ξᵢ(t) = ∇φ̃ᵢ(Λ̂₀(t−))`.
    fn influence(&self, theta: &[f64], hazard: &StepHazard) -> Result<DMatrix<f64>> {
        let d = self.d();
        let m = self.grid.nodes.len();
        let n = self.cohort.len();
        let nodal = self.nodal(theta, true)?;
        let sums = self.step_sums(&nodal, true);
        let mut out = DMatrix::zeros(n, d);
        let mut lw = vec![0.0; m];
        for ((st, st_sums), cs) in self.cohort.strata.iter().zip(&sums).zip(hazard) {
            // ascending cumulative sums of m L(c)/S0 and m L(c) S1/S0² over event times
            let k_n = st.steps.len();
            let mut times = Vec::with_capacity(k_n);
            let mut c0 = vec![vec![0.0; m]];
            let mut c1 = vec![vec![0.0; m * d]];
            let mut mean_at = Vec::with_capacity(k_n);
            for k in (0..k_n).rev() {
                let step = &st.steps[k];
                self.grid.weights(cs[k], &mut lw);
                let (n0, n1) = &st_sums[k];
                let s0: f64 = lw.iter().zip(n0).map(|(a, b)| a * b).sum();
                let s1: Vec<f64> = (0..d).map(|a| (0..m).map(|j| lw[j] * n1[j * d + a]).sum()).collect();
                let cnt = step.events.len() as f64;
                let mut next0 = c0.last().unwrap().clone();
                let mut next1 = c1.last().unwrap().clone();
                for j in 0..m {
                    next0[j] += cnt * lw[j] / s0;
                    for a in 0..d {
                        next1[j * d + a] += cnt * lw[j] * s1[a] / (s0 * s0);
                    }
                }
                c0.push(next0);
                c1.push(next1);
                times.push(step.time);
                mean_at.push((s1.iter().map(|v| v / s0).collect::<Vec<f64>>(), lw.clone()));
            }
            for &i in &st.members {
                let subj = &self.cohort.subjects()[i];
                let lo = times.partition_point(|&t| t < subj.entry_time);
                let hi = times.partition_point(|&t| t <= subj.followup_time);
                let r = &nodal.r[i * m..(i + 1) * m];
                let g = &nodal.g[i * m * d..(i + 1) * m * d];
                for a in 0..d {
                    let mut comp = 0.0;
                    for j in 0..m {
                        let a0 = c0[hi][j] - c0[lo][j];
                        let a1 = c1[hi][j * d + a] - c1[lo][j * d + a];
                        comp += g[j * d + a] * a0 - r[j] * a1;
                    }
                    out[(i, a)] = -comp;
                }
                if subj.event {
                    let k = times.partition_point(|&t| t < subj.followup_time);
                    let (mean, w) = &mean_at[k];
                    let ri: f64 = w.iter().zip(r).map(|(a, b)| a * b).sum();
                    for a in 0..d {
                        let gi: f64 = (0..m).map(|j| w[j] * g[j * d + a]).sum();
                        out[(i, a)] += gi / ri - mean[a];
                    }
                }
            }
        }
        Ok(out)
    }

    fn hazard_functions(&self, hazard: &StepHazard) -> Vec<BaselineHazard> {
        self.cohort
            .strata
            .iter()
            .zip(hazard)
            .map(|(st, cs)| {
                let k_n = st.steps.len();
                let mut times = Vec::with_capacity(k_n);
                let mut jumps = Vec::with_capacity(k_n);
                for k in (0..k_n).rev() {
                    times.push(st.steps[k].time);
                    let after = if k == 0 { cs[k_n] } else { cs[k - 1] };
                    jumps.push(after - cs[k]);
                }
                BaselineHazard { times, jumps }
            })
            .collect()
    }
}

/// `V |Λ| Vᵀ` with eigenvalues floored relative to the largest: a positive
/// definite ascent metric where the pseudo-likelihood is locally not concave.
fn absolute_floored(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let floored = eig.eigenvalues.map(|l| l.abs().max(1e-8 * top));
    &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose()
}

struct JointOutcome {
    theta: Vec<f64>,
    hazard: StepHazard,
    iterations: usize,
    trace: Vec<f64>,
    ascent: Vec<(f64, f64)>,
}

/// One chord-Newton step on `θ` per update of `Λ̂₀`, with the difference
/// Hessian reused until a step needs halving. Converges to the same fixed point
/// as fully maximizing over `θ` between updates, at a fraction of the cost.
/// Returns `None` when the iteration stalls, leaves the bracket or hits the
/// cap, in which case the caller falls back to [`nested_iteration`].
fn joint_iteration<B>(
    problem: &mut Problem,
    breslow: &B,
    start: &[f64],
    mut hazard: StepHazard,
    active: &[usize],
    bracket: (f64, f64),
    cfg: &FitConfig,
) -> Result<Option<JointOutcome>>
where
    B: Fn(&mut Problem, &[f64]) -> Result<StepHazard>,
{
    const REFRESH_EVERY: usize = 4;
    let opt = &cfg.optim;
    let tau_idx = problem.d() - 1;
    let mut theta = start.to_vec();
    let mut metric: Option<DMatrix<f64>> = None;
    let mut age = 0;
    let mut trace = Vec::new();
    let mut ascent = Vec::new();
    let mut last_value = f64::NEG_INFINITY;
    for iteration in 1..=cfg.mpple.outer_max {
        let (value, score) = match problem.value_and_score(&theta, &hazard, true) {
            Ok(v) => v,
            Err(_) => return Ok(None),
        };
        if metric.is_none() || age >= REFRESH_EVERY {
            let h = match problem.neg_hessian(&theta, &hazard, active) {
                Ok(h) => h,
                Err(_) => return Ok(None),
            };
            let sub = DMatrix::from_fn(active.len(), active.len(), |a, b| h[(active[a], active[b])]);
            metric = Some(absolute_floored(&sub));
            age = 0;
        }
        age += 1;
        let g = DVector::from_iterator(active.len(), active.iter().map(|&i| score[i]));
        let Some(step) = metric.as_ref().unwrap().clone().cholesky().map(|c| c.solve(&g)) else {
            return Ok(None);
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opt.step_halving_max {
            let mut trial = theta.clone();
            for (k, &i) in active.iter().enumerate() {
                trial[i] += scale * step[k];
            }
            if let Ok((v, _)) = problem.value_and_score(&trial, &hazard, false) {
                if v >= value && v.is_finite() {
                    accepted = Some((trial, v));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, trial_value)) = accepted else {
            return Ok(None);
        };
        if scale < 1.0 {
            metric = None;
        }
        let change = trial.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        theta = trial;
        trace.push(trial_value);
        ascent.push((value, trial_value));
        if theta[tau_idx] < bracket.0
            || theta[tau_idx] > bracket.1
            || active.iter().any(|&i| theta[i].abs() > opt.divergence_bound)
        {
            return Ok(None);
        }
        let mut next = breslow(problem, &theta)?;
        let value = problem.value_and_score(&theta, &next, false)?.0;
        if value < last_value {
            damp(&mut next, &hazard);
        }
        last_value = value;
        hazard = next;
        if change < cfg.mpple.outer_tol {
            return Ok(Some(JointOutcome {
                theta,
                hazard,
                iterations: iteration,
                trace,
                ascent,
            }));
        }
    }
    Ok(None)
}

fn damp(next: &mut StepHazard, previous: &StepHazard) {
    for (a, b) in next.iter_mut().zip(previous) {
        for (x, y) in a.iter_mut().zip(b) {
            *x = 0.5 * (*x + y);
        }
    }
}

/// Full maximization over `θ` between updates of `Λ̂₀`: Newton on the full
/// vector, or the profile search over `τ` when that fails.
///
/// When full Newton heads past the bracket edge, `τ` is clamped to the edge and
/// held while only `ψ` is updated; when it fails inside the bracket, `τ` is
/// profiled once over the bracket and then held. Once `Λ̂₀` settles, `τ` is re-profiled near
/// its held value and the iteration resumes if it moved. The start comes from
/// an RR1 fit whose bracket was already scanned, so the profile here is local.
#[allow(clippy::type_complexity)]
fn nested_iteration<B>(
    problem: &mut Problem,
    breslow: &B,
    start: &[f64],
    mut hazard: StepHazard,
    active: &[usize],
    bracket: (f64, f64),
    cfg: &FitConfig,
) -> Result<(Vec<f64>, StepHazard, bool, usize, usize, Vec<f64>)>
where
    B: Fn(&mut Problem, &[f64]) -> Result<StepHazard>,
{
    const MAX_REPROFILES: usize = 4;
    let tau_idx = problem.d() - 1;
    let psi: Vec<usize> = active.iter().copied().filter(|&i| i != tau_idx).collect();
    let mut local = cfg.clone();
    local.optim.tau_scan_points = 0;
    let mut theta = start.to_vec();
    let mut converged = false;
    let mut outer = 0;
    let mut last_value = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut profiled = false;
    let mut held = false;
    let mut reprofiles = 0;
    while outer < cfg.mpple.outer_max {
        outer += 1;
        let objective = |x: &[f64], o: Order| problem.evaluate(x, &hazard, o);
        let mut inner = if held {
            newton_with(&objective, &theta, &psi, &cfg.optim, Order::Value)?
        } else {
            newton_with(&objective, &theta, active, &cfg.optim, Order::Value)?
        };
        let t = inner.x[tau_idx];
        if !held && (!inner.converged || t < bracket.0 || t > bracket.1) {
            let outside = t < bracket.0 || t > bracket.1;
            if outside || profiled {
                // Newton heads past the bracket edge (or τ was already profiled): hold τ
                let mut x = theta.clone();
                x[tau_idx] = t.clamp(bracket.0, bracket.1);
                inner = newton_with(&objective, &x, &psi, &cfg.optim, Order::Value)?;
                held = true;
            } else {
                let prof = profile_fit_with(objective, problem.p, bracket, false, &local, Order::Value)?;
                inner.x = prof.theta;
                inner.converged = prof.converged;
                inner.iterations = prof.iterations;
                inner.trace = prof.trace;
            }
            profiled = true;
        }
        iterations += inner.iterations;
        trace = inner.trace.clone();
        if !inner.converged {
            break;
        }
        let mut change = inner
            .x
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        theta = inner.x;
        if change < cfg.mpple.outer_tol && held && reprofiles < MAX_REPROFILES {
            let t = theta[tau_idx];
            let half = 0.1 * (bracket.1 - bracket.0);
            let near = ((t - half).max(bracket.0), (t + half).min(bracket.1));
            let objective = |x: &[f64], o: Order| problem.evaluate(x, &hazard, o);
            let prof = profile_fit_with(objective, problem.p, near, false, &local, Order::Value)?;
            reprofiles += 1;
            held = false;
            if prof.converged && (prof.theta[tau_idx] - t).abs() > cfg.optim.tau_tol {
                change = change.max((prof.theta[tau_idx] - t).abs());
                theta = prof.theta;
            }
        }
        let mut next = breslow(problem, &theta)?;
        let value = problem.value_and_score(&theta, &next, false)?.0;
        if value < last_value {
            damp(&mut next, &hazard);
        }
        last_value = value;
        hazard = next;
        if change < cfg.mpple.outer_tol {
            converged = true;
            break;
        }
    }
    Ok((theta, hazard, converged, outer, iterations, trace))
}

/// Fitted MPPLE together with its final baseline hazard (one per stratum).
#[derive(Debug, Clone)]
pub struct MppleFit {
    pub result: FitResult,
    pub baseline: Vec<BaselineHazard>,
    pub outer_iterations: usize,
    /// Objective before and after each accepted step, both under the hazard
    /// estimate in force for that step.
    pub step_values: Vec<(f64, f64)>,
}

/// MPPLE started from the RR1 fit; see the module docs.
pub fn fit_mpple(cohort: &Cohort, model: &MeasurementModel, cfg: &FitConfig) -> Result<FitResult> {
    fit_mpple_detailed(cohort, model, cfg).map(|f| f.result)
}

pub fn fit_mpple_detailed(cohort: &Cohort, model: &MeasurementModel, cfg: &FitConfig) -> Result<MppleFit> {
    if model.eta() <= 0.0 {
        return Err(Error::DegenerateEta);
    }
    let mc = &cfg.mpple;
    let rr1 = crate::estimators::fit_rr1(cohort, model, &cfg.without_variance())?;
    let layout = Layout {
        p: cohort.covariate_dim(),
    };
    let active = if cfg.tau_fixed.is_some() {
        layout.psi()
    } else {
        layout.all()
    };
    let bracket = rr1.tau_bracket_used;
    let cap = cfg.optim.exponent_cap;

    // initial grid: twice the ordinary Breslow hazard under the RR1 risk,
    // refined below once the pseudo-likelihood recursion has been run
    let rr = InducedRiskModel::new(cohort, model);
    let (aggs, _, _) = event_aggregates(cohort, &rr, &rr1.theta_hat.to_vec(), cap)?;
    let mut per_stratum = vec![0.0; cohort.strata.len()];
    for a in &aggs {
        per_stratum[a.stratum] += a.count as f64 / a.s0;
    }
    let lambda_max = per_stratum.iter().copied().fold(0.0, f64::max);

    let mut problem = Problem {
        cohort,
        p: layout.p,
        z: cohort
            .subjects()
            .iter()
            .flat_map(|s| s.covariates.iter().copied())
            .collect(),
        post: rr.posteriors().to_vec(),
        rule: Legendre::new(mc.quad_nodes),
        grid: ChebGrid::new(mc.cheb_nodes, (2.0 * lambda_max).max(1e-3)),
        cap,
    };
    let zero_hazard: StepHazard = cohort.strata.iter().map(|st| vec![0.0; st.steps.len() + 1]).collect();
    let breslow = |problem: &mut Problem, theta: &[f64]| -> Result<StepHazard> {
        if mc.force_zero_hazard {
            return Ok(zero_hazard.clone());
        }
        for _ in 0..16 {
            if let Some(h) = problem.breslow(theta)? {
                return Ok(h);
            }
            problem.grid = ChebGrid::new(mc.cheb_nodes, 1.25 * problem.grid.c_max());
        }
        Err(Error::NonConvergence {
            method: "mpple baseline hazard".into(),
            iterations: 16,
        })
    };

    let start = rr1.theta_hat.to_vec();
    let mut start_hazard = breslow(&mut problem, &start)?;
    // the interpolation is more accurate on a tighter interval
    let top = start_hazard
        .iter()
        .filter_map(|h| h.last().copied())
        .fold(0.0, f64::max);
    if top > 0.0 && top < 0.8 * problem.grid.c_max() {
        problem.grid = ChebGrid::new(mc.cheb_nodes, 1.2 * top);
        start_hazard = breslow(&mut problem, &start)?;
    }
    let mut warnings = Vec::new();
    let joint = joint_iteration(
        &mut problem,
        &breslow,
        &start,
        start_hazard.clone(),
        &active,
        bracket,
        cfg,
    )?;
    let (theta, hazard, converged, outer, iterations, trace, ascent) = match joint {
        Some(j) => (j.theta, j.hazard, true, j.iterations, j.iterations, j.trace, j.ascent),
        None => {
            let (theta, hazard, converged, outer, iterations, trace) =
                nested_iteration(&mut problem, &breslow, &start, start_hazard, &active, bracket, cfg)?;
            (theta, hazard, converged, outer, iterations, trace, Vec::new())
        }
    };
    if !converged && outer >= mc.outer_max {
        warnings.push(FitWarning::OuterIterationCapHit);
    }
    let final_eval = problem.evaluate(&theta, &hazard, Order::Hessian)?;
    let mut result = FitResult {
        method: Method::Mpple,
        theta_hat: ThetaParams::from_slice(&theta),
        covariance: None,
        converged,
        iterations,
        objective_at_opt: final_eval.value,
        tau_bracket_used: bracket,
        tau_fixed: cfg.tau_fixed.is_some(),
        warnings,
        objective_trace: trace,
        tau_jacobian_step: None,
    };
    if model.sigma_x2_clamped {
        result.warnings.push(FitWarning::SigmaW2ClampedToZero);
    }
    if cfg.compute_variance && converged {
        let cov = problem.influence(&theta, &hazard).and_then(|psi| {
            let n = cohort.len() as f64;
            let pa = DMatrix::from_fn(psi.nrows(), active.len(), |i, a| psi[(i, active[a])]);
            let c_hat = pa.transpose() * &pa / n;
            let lam = DMatrix::from_fn(active.len(), active.len(), |a, b| {
                final_eval.neg_hessian[(active[a], active[b])]
            }) / n;
            let inv = lam.try_inverse().ok_or(Error::SingularLambda)?;
            let cov = &inv * c_hat * inv.transpose() / n;
            let mut full = DMatrix::zeros(layout.dim(), layout.dim());
            for (a, &i) in active.iter().enumerate() {
                for (b, &j) in active.iter().enumerate() {
                    full[(i, j)] = 0.5 * (cov[(a, b)] + cov[(b, a)]);
                }
            }
            Ok(full)
        });
        match cov {
            Ok(c) => {
                result.covariance = Some(matrix_rows(&c));
                result.warnings.push(FitWarning::ApproximateCovariance);
            }
            Err(e) => result
                .warnings
                .push(FitWarning::CovarianceUnavailable { reason: e.to_string() }),
        }
    }
    let baseline = problem.hazard_functions(&hazard);
    if !converged {
        return Err(Error::NonConvergence {
            method: Method::Mpple.to_string(),
            iterations,
        });
    }
    Ok(MppleFit {
        result,
        baseline,
        outer_iterations: outer,
        step_values: ascent,
    })
}
