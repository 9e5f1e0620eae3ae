//! End-to-end properties of the estimators on simulated cohorts.

use approx::assert_abs_diff_eq;
use threshcox::estimators::{fit_naive, fit_rc1, fit_rc2, fit_rr1};
use threshcox::pl_engine::{log_partial_likelihood, score};
use threshcox::simharness::generate_cohort;
use threshcox::{
    build_cohort, Cohort, FitConfig, FitResult, MeasurementModel, SimScenario, SubjectRecord, SubstitutionPair,
};

fn cohort(n: usize, seed: u64) -> (Cohort, MeasurementModel) {
    let s = SimScenario {
        n,
        rho_xw: 0.8,
        ..SimScenario::default()
    };
    (generate_cohort(&s, seed).unwrap().cohort, s.true_model())
}

fn quiet() -> FitConfig {
    FitConfig {
        compute_variance: false,
        ..FitConfig::default()
    }
}

fn map_records(c: &Cohort, f: impl Fn(&SubjectRecord) -> SubjectRecord) -> Cohort {
    build_cohort(c.subjects().iter().map(f).collect()).unwrap()
}

fn assert_same_fit(a: &FitResult, b: &FitResult, tol: f64) {
    for (x, y) in a.theta_hat.to_vec().iter().zip(b.theta_hat.to_vec()) {
        assert_abs_diff_eq!(*x, y, epsilon = tol);
    }
}

#[test]
fn naive_estimate_is_a_stationary_point_and_a_local_max() {
    let (c, _) = cohort(800, 1);
    let fit = fit_naive(&c, &quiet()).unwrap();
    assert!(fit.converged);
    let pair = SubstitutionPair::naive(&c);
    let u = score(&c, &pair, &fit.theta_hat).unwrap();
    assert!(u[0].abs() < 1e-4 && u[1].abs() < 1e-4, "{u}");
    let best = log_partial_likelihood(&c, &pair, &fit.theta_hat).unwrap();
    for k in 0..3 {
        for h in [-0.05, 0.05] {
            let mut v = fit.theta_hat.to_vec();
            v[k] += h;
            let t = threshcox::ThetaParams::from_slice(&v);
            assert!(log_partial_likelihood(&c, &pair, &t).unwrap() <= best + 1e-9);
        }
    }
}

#[test]
fn fits_ignore_time_scale_and_subject_order() {
    let (c, m) = cohort(600, 2);
    let base = fit_rc1(&c, &m, &quiet()).unwrap();
    let stretched = map_records(&c, |r| SubjectRecord {
        followup_time: 3.0 * r.followup_time,
        ..r.clone()
    });
    assert_same_fit(&base, &fit_rc1(&stretched, &m, &quiet()).unwrap(), 1e-8);
    let mut rev: Vec<SubjectRecord> = c.subjects().to_vec();
    rev.reverse();
    let reversed = build_cohort(rev).unwrap();
    assert_same_fit(&base, &fit_rc1(&reversed, &m, &quiet()).unwrap(), 1e-6);
}

#[test]
fn naive_fit_shifts_with_the_surrogate() {
    let (c, _) = cohort(600, 3);
    let base = fit_naive(&c, &quiet()).unwrap();
    let shifted = map_records(&c, |r| SubjectRecord {
        surrogate: r.surrogate + 2.0,
        ..r.clone()
    });
    let moved = fit_naive(&shifted, &quiet()).unwrap();
    assert_abs_diff_eq!(moved.theta_hat.beta, base.theta_hat.beta, epsilon = 1e-5);
    assert_abs_diff_eq!(moved.theta_hat.omega, base.theta_hat.omega, epsilon = 1e-5);
    assert_abs_diff_eq!(moved.theta_hat.tau, base.theta_hat.tau + 2.0, epsilon = 1e-4);
}

#[test]
fn corrections_collapse_without_measurement_error() {
    let (c, _) = cohort(600, 4);
    let exact = MeasurementModel::error_free(1.0);
    let naive = fit_naive(&c, &quiet()).unwrap();
    assert_same_fit(&naive, &fit_rc1(&c, &exact, &quiet()).unwrap(), 1e-8);
    assert_same_fit(&naive, &fit_rr1(&c, &exact, &quiet()).unwrap(), 1e-6);
}

#[test]
fn fixed_tau_is_respected_and_variance_is_positive() {
    let (c, m) = cohort(800, 5);
    let cfg = FitConfig {
        tau_fixed: Some(0.25),
        ..FitConfig::default()
    };
    let fit = fit_rc2(&c, &m, &cfg).unwrap();
    assert!(fit.tau_fixed);
    assert_eq!(fit.theta_hat.tau, 0.25);
    let se = fit.standard_errors().expect("sandwich");
    assert!(se[..2].iter().all(|s| s.is_finite() && *s > 0.0), "{se:?}");
}

#[test]
fn fit_results_round_trip_through_json() {
    let (c, m) = cohort(500, 6);
    let fit = fit_rc1(&c, &m, &FitConfig::default()).unwrap();
    let text = serde_json::to_string(&fit).unwrap();
    let back: FitResult = serde_json::from_str(&text).unwrap();
    assert_eq!(fit, back);
}
