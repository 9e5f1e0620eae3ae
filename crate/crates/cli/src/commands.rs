//! Subcommands and their arguments.

use crate::grid::{self, SimulationGrid};
use crate::io::{read_cohort, write_cohort, write_reliability, write_text};
use crate::manifest::{seed_override, Manifest};
use crate::nuisance::{NuisanceArgs, NuisanceError};
use crate::report::{self, Entry};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use threshcox::biasatlas::{self, AtlasConfig};
use threshcox::simharness::{generate_cohort, ScenarioRun};
use threshcox::{fit_method, run_scenario, BiasTable, Error, FitConfig, MeasurementModel, Method, SimScenario};

#[derive(Debug, Parser)]
#[command(
    name = "threshcox",
    version,
    about = "Cox changepoint models with a mismeasured covariate"
)]
pub struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one or more estimators to a cohort CSV.
    Fit(FitArgs),
    /// Run a simulation grid and tabulate median bias.
    Simulate(SimulateArgs),
    /// Compute limiting biases over a (rho, tau) grid.
    Biasatlas(AtlasArgs),
    /// Write a simulated cohort (and replicate study) as CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Cohort CSV with columns entry_time, time, event, w, z1..zp, stratum.
    #[arg(long)]
    pub cohort: PathBuf,
    /// Comma-separated estimators: naive, rc1, rc2, rr1, rr2, mpple, simex.
    #[arg(long, value_delimiter = ',', default_value = "naive")]
    pub method: Vec<Method>,
    /// Hold the threshold fixed at this value instead of estimating it.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Replicate-study CSV for the error model.
    #[arg(long)]
    pub reliability: Option<PathBuf>,
    /// Mean of X (intercept of E[X|Z]); defaults to 0 with explicit variances
    #[arg(long, allow_negative_numbers = true)]
    pub alpha0: Option<f64>,
    /// Slopes of E[X|Z] on z1..zp, comma-separated
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub alpha1: Option<Vec<f64>>,
    /// Variance of the true covariate X
    #[arg(long)]
    pub sigma_x2: Option<f64>,
    /// Measurement-error variance of W - X
    #[arg(long)]
    pub sigma_u2: Option<f64>,
    /// Calibration line as intercept,slope,variance: E[X|W] = a + bW, Var(X|W) = v.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub calibration: Option<Vec<f64>>,
    /// Fit configuration JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bootstrap resamples for rr2
    #[arg(long)]
    pub bootstrap_reps: Option<usize>,
    /// Skip standard errors.
    #[arg(long)]
    pub no_variance: bool,
    /// Output directory
    #[arg(long, short, default_value = "threshcox-fit")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario-grid JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long, short, default_value = "threshcox-sim")]
    pub out: PathBuf,
    /// Also write every replicate's estimates.
    #[arg(long)]
    pub keep_replicates: bool,
}

#[derive(Debug, Args)]
pub struct AtlasArgs {
    /// Atlas configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `tables.json` from a `simulate` run to compare against.
    #[arg(long)]
    pub empirical: Option<PathBuf>,
    /// Output directory
    #[arg(long, short, default_value = "threshcox-atlas")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scenario JSON; defaults apply when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Cohort CSV to write
    #[arg(long, short)]
    pub out: PathBuf,
    /// Where to write the replicate study when the scenario estimates the nuisance.
    #[arg(long)]
    pub reliability_out: Option<PathBuf>,
}

/// Exit status of a completed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Some estimator did not converge.
    NonConvergence,
    /// Some estimator failed for another reason.
    FitFailure,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::NonConvergence => 2,
            Status::FitFailure => 3,
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<Status> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Biasatlas(a) => cmd_biasatlas(&a),
        Command::Generate(a) => cmd_generate(&a),
    }
}

/// Reads JSON, reporting the path of the first offending value.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| anyhow::anyhow!("{}: at '{}': {}", path.display(), e.path(), e.inner()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct FitRun<'a> {
    methods: &'a [Method],
    fit: &'a FitConfig,
    nuisance: Option<&'a MeasurementModel>,
}

pub fn cmd_fit(a: &FitArgs) -> anyhow::Result<Status> {
    let env_seed = seed_override()?;
    let mut cfg: FitConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => FitConfig::default(),
    };
    if let Some(t) = a.tau {
        cfg.tau_fixed = Some(t);
    }
    if let Some(b) = a.bootstrap_reps {
        cfg.bootstrap_reps = b;
    }
    if a.no_variance {
        cfg.compute_variance = false;
    }
    if let Some(s) = env_seed {
        cfg.seed = s;
        cfg.simex.seed = s;
    }
    if a.method.is_empty() {
        bail!("no methods requested");
    }

    let cohort = read_cohort(&a.cohort)?;
    let nuisance = NuisanceArgs {
        reliability: a.reliability.clone(),
        alpha0: a.alpha0,
        alpha1: a.alpha1.clone(),
        sigma_x2: a.sigma_x2,
        sigma_u2: a.sigma_u2,
        calibration: a.calibration.clone(),
    };
    let model = nuisance.source()?.resolve(cohort.covariate_dim())?;
    if model.is_none() {
        if let Some(m) = a.method.iter().find(|m| m.needs_nuisance()) {
            return Err(NuisanceError::Incompatible(format!(
                "{m} needs an error model; give --reliability, explicit values or --calibration"
            ))
            .into());
        }
    }
    // the naive fit never reads the error model
    let placeholder = MeasurementModel::error_free(1.0);
    let used = model.as_ref().unwrap_or(&placeholder);

    create_dir(&a.out)?;
    let mut entries = Vec::new();
    let mut status = Status::Ok;
    for &m in &a.method {
        let started = Instant::now();
        let entry = match fit_method(m, &cohort, used, &cfg) {
            Ok(f) => {
                write_json(&a.out.join(format!("{m}.json")), &f)?;
                Entry::Fit(Box::new(f))
            }
            Err(e) => {
                status = match (&e, status) {
                    (Error::NonConvergence { .. }, _) | (_, Status::NonConvergence) => Status::NonConvergence,
                    _ => Status::FitFailure,
                };
                Entry::Failed(e.to_string())
            }
        };
        eprintln!("{m}: {:.1}s", started.elapsed().as_secs_f64());
        entries.push((m, entry));
    }
    let table = report::table(&entries, cohort.covariate_dim());
    write_text(&a.out.join("report.txt"), &table)?;
    print!("{table}");

    let run = FitRun {
        methods: &a.method,
        fit: &cfg,
        nuisance: model.as_ref(),
    };
    let mut manifest = Manifest::new("fit", &run, cfg.seed, env_seed.is_some())?.with_input(&a.cohort)?;
    if let Some(r) = &a.reliability {
        manifest = manifest.with_input(r)?;
    }
    manifest.write(&a.out)?;
    Ok(status)
}

pub fn cmd_simulate(a: &SimulateArgs) -> anyhow::Result<Status> {
    let env_seed = seed_override()?;
    let mut g: SimulationGrid = grid::load(&a.config)?;
    if let Some(s) = env_seed {
        g = g.with_seed(s);
    }
    g.validate().with_context(|| a.config.display().to_string())?;
    create_dir(&a.out)?;
    let cells = g.expand();
    let mut runs: Vec<ScenarioRun> = Vec::with_capacity(cells.len());
    for (k, s) in cells.iter().enumerate() {
        let started = Instant::now();
        let run = run_scenario(s, &g.methods, &g.harness).with_context(|| format!("cell '{}'", s.label))?;
        eprintln!(
            "[{}/{}] {} ({:?}): {:.1}s, incidence {:.3}",
            k + 1,
            cells.len(),
            s.label,
            s.nuisance_mode,
            started.elapsed().as_secs_f64(),
            run.empirical_incidence
        );
        runs.push(run);
    }
    let tables: Vec<BiasTable> = runs.iter().map(|r| r.table.clone()).collect();
    write_text(&a.out.join("bias_wide.csv"), &grid::merged_wide_csv(&tables))?;
    write_text(&a.out.join("bias_long.csv"), &grid::merged_long_csv(&tables))?;
    let text: String = tables.iter().map(|t| t.to_text() + "\n").collect();
    write_text(&a.out.join("bias.txt"), &text)?;
    write_json(&a.out.join("tables.json"), &tables)?;
    if a.keep_replicates {
        let reps: Vec<_> = runs
            .iter()
            .map(|r| (&r.table.scenario.label, r.table.scenario.nuisance_mode, &r.replicates))
            .collect();
        write_json(&a.out.join("replicates.json"), &reps)?;
    }
    print!("{text}");
    Manifest::new("simulate", &g, g.base.seed, env_seed.is_some())?
        .with_input(&a.config)?
        .write(&a.out)?;
    Ok(Status::Ok)
}

pub fn cmd_biasatlas(a: &AtlasArgs) -> anyhow::Result<Status> {
    let env_seed = seed_override()?;
    let mut cfg: AtlasConfig = match &a.config {
        Some(p) => load_json(p)?,
        None => AtlasConfig::default(),
    };
    if let Some(s) = env_seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let empirical: Vec<BiasTable> = match &a.empirical {
        Some(p) => load_json(p)?,
        None => Vec::new(),
    };
    create_dir(&a.out)?;
    let atlas = biasatlas::grid(&cfg)?;
    write_text(&a.out.join("atlas.csv"), &atlas.to_csv(&empirical))?;
    write_json(&a.out.join("atlas.json"), &atlas)?;
    let mut text = atlas.to_text();
    for c in atlas.rr1_ordering() {
        text.push_str(&format!(
            "rr1 vs naive rho={} q={} {}: {:.3} vs {:.3} {}\n",
            c.rho_xw,
            c.tau_quantile,
            c.parameter,
            c.rr1,
            c.naive,
            if c.holds { "ok" } else { "FLAG" }
        ));
    }
    write_text(&a.out.join("atlas.txt"), &text)?;
    print!("{text}");
    let mut manifest = Manifest::new("biasatlas", &cfg, cfg.seed, env_seed.is_some())?;
    if let Some(p) = &a.config {
        manifest = manifest.with_input(p)?;
    }
    if let Some(p) = &a.empirical {
        manifest = manifest.with_input(p)?;
    }
    manifest.write(&a.out)?;
    Ok(Status::Ok)
}

pub fn cmd_generate(a: &GenerateArgs) -> anyhow::Result<Status> {
    let mut s: SimScenario = match &a.scenario {
        Some(p) => load_json(p)?,
        None => SimScenario::default(),
    };
    if let Some(seed) = seed_override()? {
        s.seed = seed;
    }
    s.validate()?;
    let data = generate_cohort(&s, s.seed)?;
    write_cohort(&data.cohort, &a.out)?;
    match (&data.reliability, &a.reliability_out) {
        (Some(study), Some(path)) => write_reliability(study, path)?,
        (None, Some(_)) => bail!("the scenario has a known error model; no replicate study to write"),
        _ => {}
    }
    eprintln!("{} subjects, {} events", data.cohort.len(), data.cohort.event_count());
    Ok(Status::Ok)
}
