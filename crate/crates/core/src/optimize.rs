//! Newton–Raphson over `ψ` at fixed `τ`, golden-section search over `τ`, and
//! the quantile bracket for the threshold.

use crate::error::{Error, Result};
use crate::pl_engine::{Order, PlEvaluation};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Newton stops once the Euclidean norm of the active score falls below this.
    pub psi_tol: f64,
    pub max_newton_iter: usize,
    /// Golden-section stops once the bracket is narrower than this.
    pub tau_tol: f64,
    pub tau_quantile_q: f64,
    pub step_halving_max: usize,
    /// Bound on `|log relative risk|` for any subject.
    pub exponent_cap: f64,
    /// `‖ψ‖∞` beyond which Newton declares divergence.
    pub divergence_bound: f64,
    /// Refine `(ψ, τ)` jointly after the profile search when the objective is smooth in `τ`.
    pub polish_tau: bool,
    /// Equally spaced points scanned before the golden-section search; below 3
    /// the search runs on the whole bracket.
    pub tau_scan_points: usize,
    /// Golden-section refinements, one around each of the best local maxima of the scan.
    pub tau_scan_refine: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            psi_tol: 1e-8,
            max_newton_iter: 100,
            tau_tol: 1e-4,
            tau_quantile_q: 0.05,
            step_halving_max: 20,
            exponent_cap: 20.0,
            divergence_bound: 50.0,
            polish_tau: true,
            tau_scan_points: 25,
            tau_scan_refine: 3,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.tau_quantile_q > 0.0 && self.tau_quantile_q < 0.5) {
            return bad("tau_quantile_q must lie in (0, 0.5)");
        }
        if !(self.psi_tol > 0.0 && self.tau_tol > 0.0 && self.exponent_cap > 0.0 && self.divergence_bound > 0.0) {
            return bad("tolerances, exponent_cap and divergence_bound must be positive");
        }
        if self.tau_scan_points >= 3 && self.tau_scan_refine == 0 {
            return bad("tau_scan_refine must be at least 1 when scanning");
        }
        if self.max_newton_iter == 0 {
            return bad("max_newton_iter must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn sub_matrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

/// Newton direction from the exact negative Hessian, falling back to the
/// information matrix when the former is not positive definite.
fn direction(ev: &PlEvaluation, active: &[usize]) -> Result<DVector<f64>> {
    let g = sub_vector(&ev.score, active);
    for m in [&ev.neg_hessian, &ev.information] {
        if let Some(ch) = sub_matrix(m, active).cholesky() {
            let step = ch.solve(&g);
            if step.iter().all(|x| x.is_finite()) {
                return Ok(step);
            }
        }
    }
    Err(Error::SingularInformation)
}

/// Maximizes an objective over the coordinates in `active`, holding the rest fixed.
///
/// Steps are halved until the objective does not decrease; a failed evaluation
/// (overflow) counts as a rejected step.
pub fn newton<F>(objective: F, start: &[f64], active: &[usize], config: &OptimConfig) -> Result<NewtonOutcome>
where
    F: FnMut(&[f64], Order) -> Result<PlEvaluation>,
{
    newton_with(objective, start, active, config, Order::Hessian)
}

/// [`newton`] with trial points evaluated at `trial_order`; the Hessian is
/// recomputed only at accepted points. Useful when second derivatives are costly.
pub fn newton_with<F>(
    mut objective: F,
    start: &[f64],
    active: &[usize],
    config: &OptimConfig,
    trial_order: Order,
) -> Result<NewtonOutcome>
where
    F: FnMut(&[f64], Order) -> Result<PlEvaluation>,
{
    let mut x = start.to_vec();
    let mut ev = objective(&x, Order::Hessian)?;
    let mut trace = vec![ev.value];
    let mut iterations = 0;
    loop {
        let g = sub_vector(&ev.score, active);
        // a flat direction at the optimum means the parameters are not identified
        let step = direction(&ev, active)?;
        if g.norm() < config.psi_tol {
            return Ok(NewtonOutcome {
                x,
                value: ev.value,
                converged: true,
                diverged: false,
                iterations,
                trace,
            });
        }
        if iterations >= config.max_newton_iter {
            return Ok(NewtonOutcome {
                x,
                value: ev.value,
                converged: false,
                diverged: false,
                iterations,
                trace,
            });
        }
        let decrement = g.dot(&step);
        let mut scale = 1.0;
        let mut accepted = None;
        // near the optimum a full step changes the objective only by rounding
        let floor = ev.value - 16.0 * f64::EPSILON * ev.value.abs();
        for _ in 0..=config.step_halving_max {
            let mut trial = x.clone();
            for (k, &i) in active.iter().enumerate() {
                trial[i] += scale * step[k];
            }
            if let Ok(tev) = objective(&trial, trial_order) {
                if tev.value >= floor && tev.value.is_finite() {
                    let tev = if trial_order == Order::Hessian {
                        tev
                    } else {
                        objective(&trial, Order::Hessian)?
                    };
                    accepted = Some((trial, tev));
                    break;
                }
            }
            scale *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((trial, tev)) => {
                x = trial;
                ev = tev;
                trace.push(ev.value);
            }
            None => {
                // no ascent possible: either at the optimum up to rounding or stuck
                let tiny_step = step.amax() < 1e-6 * (1.0 + active.iter().map(|&i| x[i].abs()).fold(0.0, f64::max));
                let flat = tiny_step && decrement.abs() < 1e-10 * (1.0 + ev.value.abs());
                return Ok(NewtonOutcome {
                    x,
                    value: ev.value,
                    converged: flat,
                    diverged: false,
                    iterations,
                    trace,
                });
            }
        }
        if active.iter().any(|&i| x[i].abs() > config.divergence_bound) {
            return Ok(NewtonOutcome {
                x,
                value: ev.value,
                converged: false,
                diverged: true,
                iterations,
                trace,
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOutcome {
    pub tau: f64,
    pub value: f64,
    pub evaluations: usize,
    /// The maximum sits at an end of the bracket.
    pub at_boundary: bool,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section maximization of `f` on `[lo, hi]`.
///
/// An endpoint is evaluated only when the search collapses onto it, so an
/// interior optimum costs `ceil(log(width/tol)/log(φ)) + 2` evaluations at most.
pub fn profile_tau<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> ProfileOutcome {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut evaluations = 2;
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        evaluations += 1;
    }
    let (mut tau, mut value) = if fc >= fd { (c, fc) } else { (d, fd) };
    let mut at_boundary = false;
    for edge in [lo, hi] {
        if (tau - edge).abs() <= tol {
            let fe = f(edge);
            evaluations += 1;
            if fe >= value {
                tau = edge;
                value = fe;
            }
            at_boundary = true;
        }
    }
    ProfileOutcome {
        tau,
        value,
        evaluations,
        at_boundary,
    }
}

/// Scans `points` equally spaced values of `[lo, hi]`, then runs
/// [`profile_tau`] between the neighbours of each of the `refine` best local
/// maxima of the scan and keeps the best result. Guards against profiles with
/// more than one peak; with `points < 3` it is plain [`profile_tau`].
pub fn scan_profile_tau<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol: f64,
    points: usize,
    refine: usize,
) -> ProfileOutcome {
    if points < 3 {
        return profile_tau(f, lo, hi, tol);
    }
    let step = (hi - lo) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points)
        .map(|k| if k + 1 == points { hi } else { lo + step * k as f64 })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    let mut peaks: Vec<usize> = (0..points)
        .filter(|&k| (k == 0 || values[k] >= values[k - 1]) && (k + 1 == points || values[k] >= values[k + 1]))
        .collect();
    peaks.sort_by(|a, b| values[*b].total_cmp(&values[*a]));
    peaks.truncate(refine.max(1));
    let mut best = ProfileOutcome {
        tau: grid[peaks[0]],
        value: values[peaks[0]],
        evaluations: points,
        at_boundary: false,
    };
    for k in peaks {
        let out = profile_tau(&mut f, grid[k.saturating_sub(1)], grid[(k + 1).min(points - 1)], tol);
        best.evaluations += out.evaluations;
        if out.value > best.value {
            best.tau = out.tau;
            best.value = out.value;
        }
    }
    best.at_boundary = (best.tau - lo).abs() <= tol || (hi - best.tau).abs() <= tol;
    best
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The `q` and `1 − q` type-7 quantiles of `values`.
pub fn tau_bracket(values: &[f64], q: f64) -> Result<(f64, f64)> {
    if values.is_empty() || !(q > 0.0 && q < 0.5) {
        return Err(Error::InvalidConfig(
            "tau bracket needs values and q in (0, 0.5)".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile_sorted(&sorted, q), quantile_sorted(&sorted, 1.0 - q));
    if !(hi > lo) {
        return Err(Error::DegenerateBracket { value: lo });
    }
    Ok((lo, hi))
}
