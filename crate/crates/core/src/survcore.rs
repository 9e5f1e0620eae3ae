//! Cohort data model for left-truncated, right-censored survival data.
//!
//! A [`Cohort`] is immutable once built. Alongside the subjects it stores a
//! per-stratum sweep plan: distinct event times in descending order with the
//! subjects entering and leaving the risk set between consecutive times. The
//! partial-likelihood engine walks that plan once per evaluation, so risk-set
//! sums cost O(n) rather than O(n · events).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// One individual's observed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub entry_time: f64,
    pub followup_time: f64,
    pub event: bool,
    /// Error-prone surrogate `W` of the main covariate.
    pub surrogate: f64,
    /// Error-free covariates `Z`.
    pub covariates: Vec<f64>,
    pub stratum: Option<i64>,
}

impl SubjectRecord {
    pub fn new(followup_time: f64, event: bool, surrogate: f64) -> Self {
        Self {
            entry_time: 0.0,
            followup_time,
            event,
            surrogate,
            covariates: Vec::new(),
            stratum: None,
        }
    }

    #[inline]
    pub fn at_risk(&self, t: f64) -> bool {
        self.entry_time <= t && t <= self.followup_time
    }
}

/// A distinct event time and the number of events tied at it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventTime {
    pub time: f64,
    pub count: usize,
}

/// One step of the descending-time sweep over a stratum.
#[derive(Debug, Clone)]
pub(crate) struct SweepStep {
    pub time: f64,
    /// Range into `Stratum::add_order` of subjects joining the risk set.
    pub add: Range<usize>,
    /// Range into `Stratum::remove_order` of subjects leaving it (entry after `time`).
    pub remove: Range<usize>,
    /// Range into `Stratum::event_members` of subjects failing at `time`.
    pub events: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Stratum {
    pub label: Option<i64>,
    pub members: Vec<usize>,
    pub event_times: Vec<EventTime>,
    pub add_order: Vec<usize>,
    pub remove_order: Vec<usize>,
    pub event_members: Vec<usize>,
    pub steps: Vec<SweepStep>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    subjects: Vec<SubjectRecord>,
    covariate_dim: usize,
    pub(crate) strata: Vec<Stratum>,
    max_followup: f64,
}

fn validate(row: usize, r: &SubjectRecord, p: usize) -> Result<()> {
    let bad = |reason: &str| Error::MalformedRecord {
        row,
        reason: reason.to_string(),
    };
    if !r.entry_time.is_finite() || !r.followup_time.is_finite() || !r.surrogate.is_finite() {
        return Err(bad("non-finite time or surrogate"));
    }
    if r.covariates.iter().any(|z| !z.is_finite()) {
        return Err(bad("non-finite covariate"));
    }
    if r.entry_time < 0.0 || r.followup_time < 0.0 {
        return Err(bad("negative time"));
    }
    if r.entry_time > r.followup_time {
        return Err(bad("entry time after follow-up time"));
    }
    if r.covariates.len() != p {
        return Err(bad("covariate length differs from first record"));
    }
    Ok(())
}

/// Validates records and builds the cohort with its sweep plans.
pub fn build_cohort(records: Vec<SubjectRecord>) -> Result<Cohort> {
    if records.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let p = records[0].covariates.len();
    for (row, r) in records.iter().enumerate() {
        validate(row, r, p)?;
    }

    let mut labels: Vec<Option<i64>> = records.iter().map(|r| r.stratum).collect();
    labels.sort();
    labels.dedup();

    let strata = labels
        .into_iter()
        .map(|label| {
            let members: Vec<usize> = (0..records.len()).filter(|&i| records[i].stratum == label).collect();
            build_stratum(&records, label, members)
        })
        .collect();

    let max_followup = records
        .iter()
        .map(|r| r.followup_time)
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(Cohort {
        subjects: records,
        covariate_dim: p,
        strata,
        max_followup,
    })
}

fn build_stratum(records: &[SubjectRecord], label: Option<i64>, members: Vec<usize>) -> Stratum {
    let mut event_members: Vec<usize> = members.iter().copied().filter(|&i| records[i].event).collect();
    // descending event time
    event_members.sort_by(|&a, &b| records[b].followup_time.total_cmp(&records[a].followup_time));

    let mut add_order = members.clone();
    add_order.sort_by(|&a, &b| records[b].followup_time.total_cmp(&records[a].followup_time));
    let mut remove_order = members.clone();
    remove_order.sort_by(|&a, &b| records[b].entry_time.total_cmp(&records[a].entry_time));

    let mut steps = Vec::new();
    let mut event_times = Vec::new();
    let (mut add_ptr, mut rm_ptr, mut ev_ptr) = (0, 0, 0);
    while ev_ptr < event_members.len() {
        let t = records[event_members[ev_ptr]].followup_time;
        let ev_start = ev_ptr;
        while ev_ptr < event_members.len() && records[event_members[ev_ptr]].followup_time == t {
            ev_ptr += 1;
        }
        let add_start = add_ptr;
        while add_ptr < add_order.len() && records[add_order[add_ptr]].followup_time >= t {
            add_ptr += 1;
        }
        let rm_start = rm_ptr;
        while rm_ptr < remove_order.len() && records[remove_order[rm_ptr]].entry_time > t {
            rm_ptr += 1;
        }
        steps.push(SweepStep {
            time: t,
            add: add_start..add_ptr,
            remove: rm_start..rm_ptr,
            events: ev_start..ev_ptr,
        });
        event_times.push(EventTime {
            time: t,
            count: ev_ptr - ev_start,
        });
    }
    event_times.reverse();

    Stratum {
        label,
        members,
        event_times,
        add_order,
        remove_order,
        event_members,
        steps,
    }
}

impl Cohort {
    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Number of error-free covariates `p`.
    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    /// Parameter dimension `p + 3` of `(γ, β, ω, τ)`.
    pub fn theta_dim(&self) -> usize {
        self.covariate_dim + 3
    }

    pub fn max_followup(&self) -> f64 {
        self.max_followup
    }

    pub fn event_count(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn stratum_labels(&self) -> Vec<Option<i64>> {
        self.strata.iter().map(|s| s.label).collect()
    }

    /// Distinct event times (ascending) of the given stratum, with tie counts.
    pub fn event_times(&self, stratum: Option<i64>) -> &[EventTime] {
        self.strata
            .iter()
            .find(|s| s.label == stratum)
            .map(|s| s.event_times.as_slice())
            .unwrap_or(&[])
    }

    /// Distinct event times over all strata, ascending.
    pub fn all_event_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .strata
            .iter()
            .flat_map(|s| s.event_times.iter().map(|e| e.time))
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    pub fn surrogates(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.surrogate).collect()
    }

    /// Copy of the cohort with the surrogate column replaced.
    pub fn with_surrogates(&self, values: &[f64]) -> Result<Cohort> {
        assert_eq!(values.len(), self.subjects.len());
        let records = self
            .subjects
            .iter()
            .zip(values)
            .map(|(s, &w)| SubjectRecord {
                surrogate: w,
                ..s.clone()
            })
            .collect();
        build_cohort(records)
    }

    /// Resample of the cohort with the given subject indices (duplicates allowed).
    pub fn resample(&self, indices: &[usize]) -> Result<Cohort> {
        build_cohort(indices.iter().map(|&i| self.subjects[i].clone()).collect())
    }
}

/// Subjects of `stratum` at risk at time `t`.
pub fn risk_set(cohort: &Cohort, t: f64, stratum: Option<i64>) -> Vec<usize> {
    cohort
        .subjects
        .iter()
        .enumerate()
        .filter(|(_, s)| s.stratum == stratum && s.at_risk(t))
        .map(|(i, _)| i)
        .collect()
}
