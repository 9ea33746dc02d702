//! Command-line experiment runner.
//!
//! Every command reads one [`ExperimentConfig`], applies the command-line
//! overrides, and writes its artifacts to the output directory. Each file
//! starts with the resolved config and seed: as `#` comment lines in CSV,
//! and as `config`/`seed` fields in JSON.

pub mod config;
mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use ge_sched::bounds::{bound_report, BoundReport};
use ge_sched::calibration::{calibrate, CalibrationResult};
use ge_sched::channel::{BeliefState, Observation};
use ge_sched::index::oracle::{OracleConfig, SubsidyProblem};
use ge_sched::index::whittle_index;
use ge_sched::policies::PolicyKind;
use ge_sched::simulator::{estimate_ratio, run_experiment, stability_probe, ExperimentResult, Stat};

pub use config::ExperimentConfig;
use config::{SweepAxis, SweepMeasure};
use output::Artifacts;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ge_sched::Error),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Csv(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ge-sched", version, about = "Index scheduling experiments over ON/OFF Markov channels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the calibrated threshold and randomization.
    Calibrate(Common),
    /// Run replications of the configured policy.
    Simulate(Common),
    /// Run one experiment per value of the configured sweep axis.
    Sweep(Common),
    /// Evaluate the analytic bounds.
    Bounds(Common),
    /// Compare the closed-form index with the numeric oracle.
    VerifyIndex(Common),
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Write the per-slot trace.
    #[arg(long)]
    pub trace: bool,
}

impl Common {
    /// Loads the config and applies the overrides.
    pub fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.trace {
            cfg.trace = true;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Calibrate(c) | Command::Simulate(c) | Command::Sweep(c) | Command::Bounds(c) | Command::VerifyIndex(c) => c,
    };
    let (cfg, out) = common.resolve()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = common.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().map_err(|e| CliError::Io(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Calibrate(_) => cmd_calibrate(&cfg, &out).map(|_| ()),
        Command::Simulate(_) => cmd_simulate(&cfg, &out).map(|_| ()),
        Command::Sweep(_) => cmd_sweep(&cfg, &out).map(|_| ()),
        Command::Bounds(_) => {
            let r = cmd_bounds(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            Ok(())
        }
        Command::VerifyIndex(_) => cmd_verify_index(&cfg, &out).map(|_| ()),
    })
}

/// Calibrates with budget `K` and writes `calibration.json` and
/// `calibration.csv`.
pub fn cmd_calibrate(cfg: &ExperimentConfig, out: &Path) -> Result<CalibrationResult, CliError> {
    let setup = cfg.setup()?;
    let r = calibrate(&setup.models, &setup.weights, cfg.tau, setup.policy.k)?;
    let art = Artifacts::new(out, cfg)?;
    art.json("calibration.json", &r)?;
    let mut w = art.csv("calibration.csv")?;
    w.write_record(["user", "p01", "p11", "weight", "tx_time", "marginal_keys", "omega_tau", "rho_tau"])?;
    for (u, m) in setup.models.iter().enumerate() {
        let keys: Vec<String> = r
            .marginal_entries
            .iter()
            .filter(|e| e.0 == u)
            .map(|e| e.1.label())
            .collect();
        w.write_record([
            u.to_string(),
            m.p01().to_string(),
            m.p11().to_string(),
            r.weights[u].to_string(),
            r.tx_time[u].to_string(),
            keys.join(";"),
            r.omega_tau.to_string(),
            r.rho_tau.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(r)
}

/// Runs the configured replications and writes `summary.csv`,
/// `per_user.csv`, `frames.csv`, `summary.json`, and with tracing
/// `trace.csv`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentResult, CliError> {
    let setup = cfg.setup()?;
    let res = run_experiment(&setup, cfg.replications, cfg.seed)?;
    let art = Artifacts::new(out, cfg)?;
    output::write_summary(&art, &res)?;
    output::write_per_user(&art, &res)?;
    output::write_frames(&art, &res)?;
    if cfg.trace {
        output::write_trace(&art, &res)?;
    }
    art.json("summary.json", &res.summary)?;
    Ok(res)
}

/// One long-format row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
    pub n: usize,
    pub note: String,
}

fn sweep_point(base: &ExperimentConfig, axis: SweepAxis, v: f64) -> Result<ExperimentConfig, CliError> {
    let mut c = base.clone();
    let as_int = |name: &str| -> Result<usize, CliError> {
        if v < 1.0 || v.fract() != 0.0 {
            return Err(CliError::Config {
                field: format!("sweep.values ({name})"),
                message: format!("{v} is not a positive integer"),
            });
        }
        Ok(v as usize)
    };
    match axis {
        SweepAxis::M => {
            c.m = as_int("M")?;
            if let (Some(per), Some(g)) = (base.sweep.as_ref().and_then(|s| s.users_per_m), c.channels.generate.as_mut()) {
                g.n = per * c.m;
                c.n = None;
                c.weights = None;
            }
        }
        SweepAxis::K => c.k = Some(as_int("K")?),
        SweepAxis::T => c.frame_length = as_int("T")? as u64,
        SweepAxis::LambdaScale => {
            let a = c.arrivals.as_mut().ok_or_else(|| CliError::Config {
                field: "arrivals".into(),
                message: "a lambda_scale sweep needs arrivals".into(),
            })?;
            a.rate = a.rate.map(|r| r * v);
            a.rates = a.rates.as_ref().map(|rs| rs.iter().map(|r| r * v).collect());
        }
    }
    Ok(c)
}

fn stat_row(axis: &str, v: f64, metric: &str, s: Stat, note: &str) -> SweepRow {
    SweepRow {
        axis: axis.into(),
        value: v,
        metric: metric.into(),
        mean: s.mean,
        std: s.std,
        ci95: s.ci95,
        n: s.n,
        note: note.into(),
    }
}

fn measure_point(c: &ExperimentConfig, axis: &str, v: f64, measure: SweepMeasure) -> Result<Vec<SweepRow>, CliError> {
    let setup = c.setup()?;
    Ok(match measure {
        SweepMeasure::Simulate => {
            let res = run_experiment(&setup, c.replications, c.seed)?;
            res.summary.rows().into_iter().map(|(m, s)| stat_row(axis, v, m, s, "")).collect()
        }
        SweepMeasure::Ratio => {
            let mut s = setup;
            s.policy.kind = PolicyKind::StringentIndex;
            let est = estimate_ratio(&s, c.replications, c.seed, c.common_random_numbers)?;
            let ratio = Stat::from_samples(&est.per_replication);
            let k = format!("K={}", s.policy.k);
            vec![
                stat_row(axis, v, "ratio", ratio, &k),
                stat_row(axis, v, "v_str", est.v_str, &k),
                stat_row(axis, v, "v_rel", est.v_rel, &k),
                stat_row(axis, v, "broadcast_fraction", est.broadcast_fraction, &k),
            ]
        }
        SweepMeasure::Stability => {
            let mut s = setup;
            s.saturated = false;
            let rep = stability_probe(&s, c.replications, c.seed)?;
            let verdict = format!("{:?}", rep.verdict).to_uppercase();
            let single = |x: f64| Stat::from_samples(&[x]);
            let mut rows = vec![
                stat_row(axis, v, "slope", single(rep.slope), &verdict),
                stat_row(axis, v, "lyapunov_drift", rep.drift, &verdict),
            ];
            for (i, q) in rep.quarter_means.iter().enumerate() {
                rows.push(stat_row(axis, v, &format!("quarter{}_total_queue", i + 1), single(*q), &verdict));
            }
            rows
        }
    })
}

/// Runs each sweep point and writes `sweep.csv`. A failing point is
/// recorded with its error and the sweep continues.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>, CliError> {
    let sweep = cfg.sweep.clone().ok_or_else(|| CliError::Config {
        field: "sweep".into(),
        message: "the sweep command needs a [sweep] table".into(),
    })?;
    if sweep.values.is_empty() {
        return Err(CliError::Config {
            field: "sweep.values".into(),
            message: "at least one value is required".into(),
        });
    }
    let axis = serde_json::to_value(sweep.axis).expect("axis serializes");
    let axis = axis.as_str().unwrap_or("axis").to_string();
    let mut rows = Vec::new();
    for &v in &sweep.values {
        match sweep_point(cfg, sweep.axis, v).and_then(|c| measure_point(&c, &axis, v, sweep.measure)) {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::error!("sweep point {axis} = {v} failed: {e}");
                rows.push(SweepRow {
                    axis: axis.clone(),
                    value: v,
                    metric: "error".into(),
                    mean: f64::NAN,
                    std: f64::NAN,
                    ci95: f64::NAN,
                    n: 0,
                    note: e.to_string(),
                });
            }
        }
    }
    let art = Artifacts::new(out, cfg)?;
    let mut w = art.csv("sweep.csv")?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Evaluates the bounds for the configured `(tau, M, K, delta)` and writes
/// `bounds.json`.
pub fn cmd_bounds(cfg: &ExperimentConfig, out: &Path) -> Result<BoundReport, CliError> {
    let models = cfg.models()?;
    let r = bound_report(&models, cfg.tau, cfg.m, cfg.resolved_k()?, cfg.delta, cfg.log_base)?;
    Artifacts::new(out, cfg)?.json("bounds.json", &r)?;
    Ok(r)
}

/// One row of the index verification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexRow {
    pub user: usize,
    pub belief: String,
    pub pi: f64,
    pub weight: f64,
    pub closed_form: f64,
    pub oracle: f64,
    pub abs_err: f64,
}

/// Tabulates the closed-form index against the numeric oracle for every
/// positive-weight user at `b_s` and ages `1..=verify_max_age`, and writes
/// `verify_index.csv`. Rows are grouped by user in ascending belief order.
pub fn cmd_verify_index(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<IndexRow>, CliError> {
    let models = cfg.models()?;
    let weights = cfg.resolved_weights(models.len());
    if weights.len() != models.len() {
        return Err(CliError::Config {
            field: "weights".into(),
            message: format!("{} weights for {} channels", weights.len(), models.len()),
        });
    }
    if cfg.verify_max_age > cfg.oracle_truncation {
        return Err(CliError::Config {
            field: "verify_max_age".into(),
            message: "must not exceed oracle_truncation".into(),
        });
    }
    let oc = OracleConfig {
        truncation: cfg.oracle_truncation,
        tolerance: cfg.oracle_tolerance,
        ..OracleConfig::default()
    };
    let per_user = models
        .par_iter()
        .zip(&weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(m, &w)| {
            let mut p = SubsidyProblem::new(m, oc)?;
            let mut states = vec![BeliefState::Stationary];
            for l in 1..=cfg.verify_max_age {
                states.push(BeliefState::observed(Observation::Off, l));
                states.push(BeliefState::observed(Observation::On, l));
            }
            let mut rows = states
                .into_iter()
                .map(|b| {
                    let closed = whittle_index(m, b)?.value;
                    let oracle = p.index_of(b)?;
                    Ok(IndexRow {
                        user: m.user_id(),
                        belief: b.label(),
                        pi: b.value(m),
                        weight: w,
                        closed_form: closed,
                        oracle,
                        abs_err: (closed - oracle).abs(),
                    })
                })
                .collect::<Result<Vec<_>, ge_sched::Error>>()?;
            rows.sort_by(|a, b| a.pi.total_cmp(&b.pi).then(a.belief.cmp(&b.belief)));
            Ok(rows)
        })
        .collect::<Result<Vec<_>, ge_sched::Error>>()?;
    let rows: Vec<IndexRow> = per_user.into_iter().flatten().collect();
    let art = Artifacts::new(out, cfg)?;
    let mut w = art.csv("verify_index.csv")?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
