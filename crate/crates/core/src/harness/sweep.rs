use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use crate::bellman::{value_iteration, value_iteration_stochastic, Mode, TrainOutcome};
use crate::error::{Error, Result};
use crate::execution::{evaluate_policy, Observation};
use crate::histogram::histogram_count;

use super::config::{Baseline, ExperimentConfig};

/// One CSV row per kappa. Only deterministic quantities go here; timings
/// live in the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub kappa: u32,
    pub observation: String,
    pub table_size: u64,
    pub train_iterations: Option<usize>,
    pub train_residual: Option<f64>,
    pub mean_return: Option<f64>,
    pub stderr_return: Option<f64>,
    pub status: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub kappa: u32,
    pub observation: String,
    pub train_wall_ms: f64,
    pub eval_wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub version: String,
    pub rows: Vec<SweepRow>,
    pub timings: Vec<Timing>,
    /// Least-squares slope of log train time against log table size.
    pub time_slope: Option<f64>,
}

/// `|S| |A| C(kappa + d - 1, d - 1)` with `d = |S|` (marginal) or `|S||A|`
/// (joint).
pub fn table_size(n_states: usize, n_actions: usize, mode: Mode, kappa: u32) -> Result<u64> {
    let d = match mode {
        Mode::Marginal => n_states,
        Mode::Joint => n_states * n_actions,
    };
    histogram_count(d, kappa)?
        .checked_mul((n_states * n_actions) as u64)
        .ok_or(Error::Overflow("table size"))
}

/// Trains with the configured reward model.
pub fn train(cfg: &ExperimentConfig, kappa: u32) -> Result<TrainOutcome> {
    let tc = cfg.train_config(kappa);
    match cfg.stochastic_environment()? {
        Some(env) => value_iteration_stochastic(&env, &tc),
        None => value_iteration(cfg.environment()?.as_ref(), &tc),
    }
}

fn run_one(cfg: &ExperimentConfig, kappa: u32, observation: Observation, hash: &str) -> Result<(SweepRow, Timing)> {
    let env = cfg.environment()?;
    let label = match observation {
        Observation::Sampled => "sampled",
        Observation::Exact => "exact",
    };
    let mut row = SweepRow {
        kappa,
        observation: label.into(),
        table_size: table_size(env.n_states(), env.n_actions(), cfg.mode, kappa)?,
        train_iterations: None,
        train_residual: None,
        mean_return: None,
        stderr_return: None,
        status: "ok".into(),
        config_hash: hash.into(),
    };
    let mut timing = Timing {
        kappa,
        observation: label.into(),
        train_wall_ms: 0.0,
        eval_wall_ms: 0.0,
    };
    let weights = cfg.weights()?;
    let result = (|| -> Result<()> {
        let t0 = Instant::now();
        let out = train(cfg, kappa)?;
        timing.train_wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        row.train_iterations = Some(out.table.meta.iterations);
        row.train_residual = Some(out.table.meta.residual);
        if !out.converged {
            row.status = "not_converged".into();
        }
        let t1 = Instant::now();
        let ev = evaluate_policy(
            env.as_ref(),
            &weights,
            &out.table,
            &cfg.execution_config(observation),
            cfg.execute.seeds,
            crate::rng::derive_seed(cfg.master_seed, &[crate::rng::tag::EXECUTE, kappa as u64]),
        )?;
        timing.eval_wall_ms = t1.elapsed().as_secs_f64() * 1e3;
        row.mean_return = Some(ev.mean);
        row.stderr_return = Some(ev.stderr);
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("kappa {kappa}: {e}");
        row.status = format!("error: {e}");
    }
    Ok((row, timing))
}

/// Trains and evaluates every kappa in the list. A failure at one kappa is
/// recorded in its row and the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut jobs: Vec<(u32, Observation)> = cfg.kappa_list.iter().map(|&k| (k, Observation::Sampled)).collect();
    if cfg.execute.baseline == Baseline::Exact {
        jobs.push((cfg.n as u32 - 1, Observation::Exact));
    }
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for (kappa, obs) in jobs {
        log::info!("sweep: kappa {kappa} ({obs:?})");
        let (row, timing) = run_one(cfg, kappa, obs, &hash)?;
        rows.push(row);
        timings.push(timing);
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .zip(&timings)
        .filter(|(r, t)| r.train_iterations.is_some() && t.train_wall_ms > 0.0 && r.observation == "sampled")
        .map(|(r, t)| ((r.table_size as f64).ln(), t.train_wall_ms.ln()))
        .collect();
    Ok(SweepReport {
        config_hash: hash,
        version: env!("CARGO_PKG_VERSION").to_string(),
        rows,
        timings,
        time_slope: log_log_slope(&points),
    })
}

pub(crate) fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// CSV bytes of the report rows.
pub fn sweep_csv(report: &SweepReport) -> Result<Vec<u8>> {
    super::to_csv(&report.rows)
}

/// Writes the CSV and the JSON report; returns their paths.
pub fn write_sweep(cfg: &ExperimentConfig, report: &SweepReport) -> Result<(PathBuf, PathBuf)> {
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = cfg.sweep_csv_path();
    std::fs::write(&csv_path, sweep_csv(report)?).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = cfg.report_json_path();
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}
