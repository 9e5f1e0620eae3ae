//! Fit reports in the layout of a published Cox analysis table: per parameter,
//! `estimate(se)`, the two-sided Wald p-value, the 95% interval of the
//! coefficient and the 95% interval of `exp(coefficient)`.

use std::fmt::Write as _;
use threshcox::normal;
use threshcox::{parameter_names, FitResult, Method};

/// Wald summary of one coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wald {
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub ci: (f64, f64),
    pub exp_ci: (f64, f64),
}

impl Wald {
    pub fn new(estimate: f64, se: f64) -> Self {
        let z = normal::inv_cdf(0.975);
        let ci = (estimate - z * se, estimate + z * se);
        Self {
            estimate,
            se,
            p_value: 2.0 * normal::cdf(-(estimate / se).abs()),
            ci,
            exp_ci: (ci.0.exp(), ci.1.exp()),
        }
    }
}

/// Outcome of one requested method.
#[derive(Debug, Clone)]
pub enum Entry {
    Fit(Box<FitResult>),
    Failed(String),
}

const WIDTH: usize = 24;

fn num(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.3}")
    }
}

/// Cell lines for parameter `k` of a fit: four lines, or fewer for `τ`.
fn cell(fit: &FitResult, k: usize, is_tau: bool) -> [String; 4] {
    let est = fit.theta_hat.to_vec()[k];
    if is_tau && fit.tau_fixed {
        return [
            format!("{} (fixed)", num(est)),
            String::new(),
            String::new(),
            String::new(),
        ];
    }
    let se = fit
        .standard_errors()
        .map(|s| s[k])
        .filter(|s| *s > 0.0 && s.is_finite());
    let Some(se) = se else {
        return [format!("{} (-)", num(est)), "-".into(), "-".into(), "-".into()];
    };
    let w = Wald::new(est, se);
    [
        format!("{}({})", num(w.estimate), num(w.se)),
        num(w.p_value),
        format!("[{},{}]", num(w.ci.0), num(w.ci.1)),
        if is_tau {
            String::new()
        } else {
            format!("[{},{}]", num(w.exp_ci.0), num(w.exp_ci.1))
        },
    ]
}

/// Renders the combined table for every requested method.
pub fn table(entries: &[(Method, Entry)], p: usize) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "covariate");
    for (m, _) in entries {
        let _ = write!(out, "{:>WIDTH$}", m.label().to_uppercase());
    }
    out.push('\n');
    for (k, name) in parameter_names(p).iter().enumerate() {
        let is_tau = k == p + 2;
        let lines: Vec<[String; 4]> = entries
            .iter()
            .map(|(_, e)| match e {
                Entry::Fit(f) => cell(f, k, is_tau),
                Entry::Failed(_) => ["failed".into(), String::new(), String::new(), String::new()],
            })
            .collect();
        for row in 0..4 {
            if lines.iter().all(|l| l[row].is_empty()) {
                continue;
            }
            let _ = write!(out, "{:<10}", if row == 0 { name.as_str() } else { "" });
            for l in &lines {
                let _ = write!(out, "{:>WIDTH$}", l[row]);
            }
            out.push('\n');
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<10}", "converged");
    for (_, e) in entries {
        let s = match e {
            Entry::Fit(f) if f.converged => "yes",
            _ => "no",
        };
        let _ = write!(out, "{s:>WIDTH$}");
    }
    out.push('\n');
    out.push_str("\nrows: estimate(standard error), Wald p-value, 95% CI, 95% CI of exp(coefficient)\n");
    for (m, e) in entries {
        match e {
            Entry::Failed(why) => {
                let _ = writeln!(out, "{m}: {why}");
            }
            Entry::Fit(f) if !f.warnings.is_empty() => {
                let w: Vec<String> = f.warnings.iter().map(|w| format!("{w:?}")).collect();
                let _ = writeln!(out, "{m} warnings: {}", w.join(", "));
            }
            Entry::Fit(_) => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use threshcox::ThetaParams;

    fn fit(tau_fixed: bool) -> FitResult {
        let se = [0.389, 0.393, 0.2];
        FitResult {
            method: Method::Naive,
            theta_hat: ThetaParams::new(vec![], 1.177, -1.021, 0.6822),
            covariance: Some(
                (0..3)
                    .map(|i| (0..3).map(|j| if i == j { se[i] * se[i] } else { 0.0 }).collect())
                    .collect(),
            ),
            converged: true,
            iterations: 5,
            objective_at_opt: -10.0,
            tau_bracket_used: (0.0, 1.0),
            tau_fixed,
            warnings: vec![],
            objective_trace: vec![],
            tau_jacobian_step: None,
        }
    }

    #[test]
    fn wald_matches_hand_values() {
        // 1.177 / 0.389 = 3.026, two-sided p = 0.0025
        let w = Wald::new(1.177, 0.389);
        assert_relative_eq!(w.p_value, 0.002479, max_relative = 1e-3);
        assert_relative_eq!(w.ci.0, 1.177 - 1.959964 * 0.389, max_relative = 1e-6);
        assert_relative_eq!(w.exp_ci.1, w.ci.1.exp(), max_relative = 1e-12);
    }

    #[test]
    fn fixed_tau_is_reported_as_given() {
        let t = table(&[(Method::Naive, Entry::Fit(Box::new(fit(true))))], 0);
        let tau_line = t.lines().find(|l| l.starts_with("tau")).unwrap();
        assert!(tau_line.contains("0.682 (fixed)"), "{t}");
    }

    #[test]
    fn layout_has_four_lines_per_coefficient() {
        let entries = vec![
            (Method::Naive, Entry::Fit(Box::new(fit(false)))),
            (Method::Rc1, Entry::Failed("did not converge".into())),
        ];
        let t = table(&entries, 0);
        let lines: Vec<&str> = t.lines().collect();
        let b = lines.iter().position(|l| l.starts_with("beta")).unwrap();
        assert!(lines[b].contains("1.177(0.389)"));
        assert!(lines[b + 1].contains("0.002"));
        assert!(lines[b + 2].trim_start().starts_with('['));
        assert!(lines[b + 3].trim_start().starts_with('['));
        assert!(lines[b].contains("failed"));
        assert!(t.contains("rc1: did not converge"));
    }
}
