//! Shared fixtures for the benchmarks.

use threshcox::simharness::generate_cohort;
use threshcox::{Cohort, MeasurementModel, SimScenario};

/// Common-disease cohort at `ρ = 0.8` with its true error model.
pub fn common_cohort(n: usize, seed: u64) -> (Cohort, MeasurementModel) {
    let s = SimScenario {
        n,
        ..SimScenario::default()
    };
    let data = generate_cohort(&s, seed).expect("default scenario is valid");
    (data.cohort, s.true_model())
}
