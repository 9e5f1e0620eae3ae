//! Model-level invariants checked over random inputs.

use proptest::prelude::*;
use threshcox::pl_engine::log_partial_likelihood;
use threshcox::{build_cohort, MeasurementModel, Posterior, SubjectRecord, SubstitutionPair, ThetaParams};

fn posterior() -> impl Strategy<Value = Posterior> {
    (-3.0..3.0f64, 0.05..2.0f64).prop_map(|(mu, eta)| Posterior { mu, eta })
}

fn records() -> impl Strategy<Value = Vec<SubjectRecord>> {
    prop::collection::vec((0.01..5.0f64, any::<bool>(), -2.0..2.0f64), 5..40).prop_map(|rows| {
        let mut rs: Vec<SubjectRecord> = rows.into_iter().map(|(t, d, w)| SubjectRecord::new(t, d, w)).collect();
        rs[0].event = true;
        rs
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn expected_excess_is_convex_bounded_and_decreasing(p in posterior(), tau in -4.0..4.0f64, h in 0.01..1.0f64) {
        let e = p.expect_plus(tau);
        prop_assert!(e >= (p.mu - tau).max(0.0) - 1e-12);
        prop_assert!(p.expect_plus(tau + h) <= e + 1e-12);
        let mid = 0.5 * (p.expect_plus(tau - h) + p.expect_plus(tau + h));
        prop_assert!(mid >= e - 1e-12);
    }

    #[test]
    fn induced_log_risk_dominates_the_plug_in(
        p in posterior(), beta in -1.5..1.5f64, omega in -1.5..1.5f64, tau in -3.0..3.0f64,
    ) {
        // Jensen: log E[exp(f(X))] >= E[f(X)]
        let r = p.induced_log_risk(beta, omega, tau);
        prop_assert!(r.value >= beta * p.mu + omega * p.expect_plus(tau) - 1e-10);
    }

    #[test]
    fn induced_risk_reduces_to_the_normal_mgf_without_a_break(p in posterior(), beta in -1.5..1.5f64, tau in -3.0..3.0f64) {
        let r = p.induced_log_risk(beta, 0.0, tau);
        let mgf = beta * p.mu + 0.5 * beta * beta * p.eta * p.eta;
        prop_assert!((r.value - mgf).abs() < 1e-9 * (1.0 + mgf.abs()));
    }

    #[test]
    fn partial_likelihood_ignores_monotone_time_maps(
        rs in records(), beta in -1.0..1.0f64, omega in -1.0..1.0f64, tau in -1.0..1.0f64,
    ) {
        let theta = ThetaParams::new(vec![], beta, omega, tau);
        let a = build_cohort(rs.clone()).unwrap();
        let warped: Vec<SubjectRecord> = rs
            .iter()
            .map(|r| SubjectRecord { followup_time: r.followup_time.powi(3) + 1.0, ..r.clone() })
            .collect();
        let b = build_cohort(warped).unwrap();
        let la = log_partial_likelihood(&a, &SubstitutionPair::naive(&a), &theta).unwrap();
        let lb = log_partial_likelihood(&b, &SubstitutionPair::naive(&b), &theta).unwrap();
        prop_assert!((la - lb).abs() < 1e-9 * (1.0 + la.abs()));
        prop_assert!(la <= 1e-12);
    }

    #[test]
    fn calibration_shrinks_toward_the_mean(w in -4.0..4.0f64, sx in 0.1..2.0f64, su in 0.01..2.0f64) {
        let m = MeasurementModel::new(0.3, vec![], sx, su).unwrap();
        let c = m.cond_mean(w, &[]);
        prop_assert!((c - 0.3).abs() <= (w - 0.3).abs() + 1e-12);
        prop_assert!((m.reliability() - sx / (sx + su)).abs() < 1e-12);
    }
}
