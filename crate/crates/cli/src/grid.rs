//! Scenario-grid configuration for `simulate`.
//!
//! A grid is a base scenario plus lists of values to cross: every combination
//! of the non-empty lists becomes one cell. An empty list keeps the base value.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use threshcox::normal;
use threshcox::{parameter_names, BiasTable, ErrorLaw, HarnessConfig, Method, NuisanceMode, SimScenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationGrid {
    pub methods: Vec<Method>,
    pub harness: HarnessConfig,
    pub base: SimScenario,
    pub vary: Vary,
}

impl Default for SimulationGrid {
    fn default() -> Self {
        Self {
            methods: vec![Method::Naive, Method::Rc1, Method::Rc2, Method::Rr1],
            harness: HarnessConfig::default(),
            base: SimScenario::default(),
            vary: Vary::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Vary {
    pub rho_xw: Vec<f64>,
    /// Thresholds as quantiles of the standard normal covariate.
    pub tau_quantile: Vec<f64>,
    pub nuisance_mode: Vec<NuisanceMode>,
    pub error_law: Vec<ErrorLaw>,
}

/// Parses a grid, reporting the JSON path of the first offending value.
pub fn parse(text: &str) -> anyhow::Result<SimulationGrid> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| anyhow::anyhow!("at '{}': {}", e.path(), e.inner()))
}

pub fn load(path: &Path) -> anyhow::Result<SimulationGrid> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    parse(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn law_tag(law: ErrorLaw) -> String {
    match law {
        ErrorLaw::Normal => "normal".into(),
        ErrorLaw::StudentT { df } => format!("t{df}"),
    }
}

/// Values of one axis, flagged when they come from `vary` rather than the base.
fn axis(values: &[f64], base: f64) -> Vec<(f64, bool)> {
    if values.is_empty() {
        vec![(base, false)]
    } else {
        values.iter().map(|v| (*v, true)).collect()
    }
}

impl SimulationGrid {
    /// One scenario per combination, in row-major order of `vary`'s fields.
    /// Cells differing only in nuisance mode share a label so their tables merge.
    pub fn expand(&self) -> Vec<SimScenario> {
        let b = &self.base;
        let modes = if self.vary.nuisance_mode.is_empty() {
            vec![b.nuisance_mode]
        } else {
            self.vary.nuisance_mode.clone()
        };
        let laws = if self.vary.error_law.is_empty() {
            vec![(b.error_law, false)]
        } else {
            self.vary.error_law.iter().map(|l| (*l, true)).collect()
        };
        let mut out = Vec::new();
        for &(rho, rho_set) in &axis(&self.vary.rho_xw, b.rho_xw) {
            for &(q, q_set) in &axis(&self.vary.tau_quantile, 0.5) {
                for &(law, law_set) in &laws {
                    for &mode in &modes {
                        let mut s = b.clone();
                        let mut label = b.label.clone();
                        s.rho_xw = rho;
                        if rho_set {
                            let _ = write!(label, "_rho{rho}");
                        }
                        if q_set {
                            s.theta_true.tau = normal::inv_cdf(q);
                            let _ = write!(label, "_q{q}");
                        }
                        s.error_law = law;
                        if law_set {
                            let _ = write!(label, "_{}", law_tag(law));
                        }
                        s.nuisance_mode = mode;
                        s.label = label;
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    /// Checks every cell; errors name the cell.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.methods.is_empty() {
            anyhow::bail!("at 'methods': no methods requested");
        }
        if let Some(q) = self.vary.tau_quantile.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            anyhow::bail!("at 'vary.tau_quantile': {q} is not in (0, 1)");
        }
        for s in self.expand() {
            s.validate().map_err(|e| anyhow::anyhow!("cell '{}': {e}", s.label))?;
        }
        Ok(())
    }

    /// Overrides the base seed; all cells share it (common random numbers).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base.seed = seed;
        self
    }
}

/// Tables merged by label so known- and estimated-nuisance columns sit side by
/// side, one row per label and parameter, one column per estimator.
pub fn merged_wide_csv(tables: &[BiasTable]) -> String {
    let mut columns: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<&BiasTable>> = Vec::new();
    for t in tables {
        for e in &t.estimators {
            if !columns.contains(e) {
                columns.push(e.clone());
            }
        }
        match groups.iter_mut().find(|g| g[0].scenario.label == t.scenario.label) {
            Some(g) => g.push(t),
            None => groups.push(vec![t]),
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["scenario", "n", "incidence", "rho_xw", "tau", "error_law", "parameter"]
        .map(String::from)
        .to_vec();
    header.extend(columns.iter().cloned());
    w.write_record(&header).expect("in-memory write");
    for members in &groups {
        let s = &members[0].scenario;
        for p in parameter_names(s.theta_true.p()) {
            let mut row = vec![
                s.label.clone(),
                s.n.to_string(),
                s.cumulative_incidence.to_string(),
                s.rho_xw.to_string(),
                format!("{:.4}", s.theta_true.tau),
                law_tag(s.error_law),
                p.clone(),
            ];
            for c in &columns {
                let cell = members.iter().find_map(|t| t.cell(c, &p));
                row.push(cell.map(|c| format!("{:.3}", c.bias)).unwrap_or_default());
            }
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Long-format rows of every table under one header.
pub fn merged_long_csv(tables: &[BiasTable]) -> String {
    let mut out = String::new();
    for (i, t) in tables.iter().enumerate() {
        let csv = t.to_long_csv();
        let body = if i == 0 {
            csv.as_str()
        } else {
            csv.split_once('\n').map_or("", |(_, b)| b)
        };
        out.push_str(body);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expands_the_cross_product() {
        let g = parse(
            r#"{"base": {"label": "c", "replications": 3},
                "vary": {"rho_xw": [0.8, 0.6], "tau_quantile": [0.5, 0.75],
                         "nuisance_mode": [{"mode": "known"}, {"mode": "estimated", "subjects": 500, "replicates": 2}]}}"#,
        )
        .unwrap();
        let cells = g.expand();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0].label, "c_rho0.8_q0.5");
        assert_eq!(cells[1].label, cells[0].label);
        assert_eq!(cells[1].nuisance_mode, NuisanceMode::estimated());
        assert!((cells[2].theta_true.tau - 0.6745).abs() < 1e-4);
        assert_eq!(cells[4].rho_xw, 0.6);
        assert!(cells.iter().all(|c| c.replications == 3));
        g.validate().unwrap();
    }

    #[test]
    fn empty_vary_keeps_the_base() {
        let g = SimulationGrid::default();
        assert_eq!(g.expand(), vec![g.base.clone()]);
    }

    #[test]
    fn errors_carry_json_paths() {
        let e = parse(r#"{"base": {"rho_xw": "high"}}"#).unwrap_err().to_string();
        assert!(e.contains("base.rho_xw"), "{e}");
        let e = parse(r#"{"vary": {"rho": [0.5]}}"#).unwrap_err().to_string();
        assert!(e.contains("vary") && e.contains("rho"), "{e}");
        let g = parse(r#"{"vary": {"rho_xw": [1.5]}}"#).unwrap();
        assert!(g.validate().is_err());
    }
}
