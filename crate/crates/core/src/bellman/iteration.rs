use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, StochasticRewardEnv};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

use super::operator::{aggregate_pmf, entry_rewards, exact_continuations};
use super::surrogate::Surrogate;
use super::table::{QMeta, QTable, TableLayout};
use super::{JointNeighborActions, Mode, NeighborActionRule, SurrogateConfig};

/// Whether the Monte-Carlo draws of an entry change between sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSchedule {
    /// Streams keyed by entry only: every sweep applies the same empirical
    /// operator, which is a `gamma`-contraction.
    #[default]
    Frozen,
    /// Streams keyed by entry and sweep index.
    Fresh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub kappa: u32,
    /// Surrogate draws per entry and sweep.
    pub samples: usize,
    pub max_iterations: usize,
    /// Early stop once the sup-norm change of a sweep drops below this.
    pub tolerance: f64,
    pub seed: u64,
    pub surrogate: SurrogateConfig,
    pub schedule: SampleSchedule,
    /// Independent reward/transition replicas averaged per entry (stochastic
    /// rewards only).
    pub resamples: usize,
    pub max_table_entries: u64,
    /// Work cap for the exact kernel.
    pub exact_cap: u64,
}

impl TrainConfig {
    pub fn new(mode: Mode, kappa: u32) -> Self {
        Self {
            mode,
            kappa,
            samples: 50,
            max_iterations: 250,
            tolerance: 1e-4,
            seed: 0,
            surrogate: SurrogateConfig::default(),
            schedule: SampleSchedule::Frozen,
            resamples: 1,
            max_table_entries: 20_000_000,
            exact_cap: 1_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("samples per entry must be at least 1"));
        }
        if self.resamples == 0 {
            return Err(Error::invalid("resamples must be at least 1"));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::invalid("tolerance must be positive and finite"));
        }
        Ok(())
    }

    /// Whether the surrogate law depends on the current table.
    fn table_dependent(&self) -> bool {
        self.surrogate.neighbor_actions == NeighborActionRule::Greedy
            && !(self.mode == Mode::Joint
                && self.surrogate.joint_neighbor_actions == JointNeighborActions::Histogram)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub table: QTable,
    /// `||Q^{t+1} - Q^t||_inf` per sweep.
    pub residuals: Vec<f64>,
    /// `||Q^{t+1}||_inf` per sweep.
    pub norms: Vec<f64>,
    pub converged: bool,
}

/// Outcomes cached across sweeps stay below this many draws.
const CACHE_LIMIT: usize = 50_000_000;

fn meta(env: &dyn Environment, cfg: &TrainConfig) -> QMeta {
    QMeta {
        gamma: env.discount(),
        env_name: env.name().to_string(),
        seed: cfg.seed,
        iterations: 0,
        residual: f64::INFINITY,
    }
}

fn check_bound(norm: f64, bound: f64, t: usize) -> Result<()> {
    if !norm.is_finite() || norm > bound * (1.0 + 1e-9) + 1e-9 {
        return Err(Error::Corrupt(format!(
            "sweep {t}: ||Q|| = {norm} exceeds r_max / (1 - gamma) = {bound}"
        )));
    }
    Ok(())
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn keys(base: u64, xi: usize, entry: usize, sweep: Option<usize>) -> Vec<u64> {
    let mut k = vec![base, xi as u64, entry as u64];
    if let Some(t) = sweep {
        k.push(t as u64);
    }
    k
}

fn iterate(env: &dyn Environment, noise: Option<&StochasticRewardEnv>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let gamma = env.discount();
    let layout = Arc::new(TableLayout::new(env, cfg.mode, cfg.kappa, cfg.max_table_entries)?);
    let n = layout.len();
    let ng = layout.n_marginals();
    let m = cfg.samples;
    let xi_count = if noise.is_some() { cfg.resamples } else { 1 };
    let bound = env.reward_bound() / (1.0 - gamma);
    let frozen = cfg.schedule == SampleSchedule::Frozen;
    let sweep_key = |t: usize| if frozen { None } else { Some(t) };

    let base_rewards = entry_rewards(env, &layout);
    let draw_reward = |xi: usize, e: usize, t: usize| -> f64 {
        match noise {
            None => base_rewards[e],
            Some(nz) => {
                let (s, a, agg) = layout.decompose(e);
                let mut rng = stream(cfg.seed, &keys(tag::REWARD_NOISE, xi, e, sweep_key(t)));
                nz.sample_reward(s, a, &aggregate_pmf(&layout, agg), &mut rng)
            }
        }
    };
    let frozen_rewards: Option<Vec<f64>> = if frozen && noise.is_some() {
        Some(
            (0..xi_count * n)
                .into_par_iter()
                .map(|i| draw_reward(i / n, i % n, 0))
                .collect(),
        )
    } else {
        None
    };

    let cache: Option<Vec<u32>> = if frozen && !cfg.table_dependent() && xi_count * n * m <= CACHE_LIMIT {
        let sur = Surrogate::new(env, &layout, cfg.surrogate, None)?;
        let chunks: Vec<Vec<u32>> = (0..xi_count * n)
            .into_par_iter()
            .map_init(
                || sur.scratch(),
                |sc, i| {
                    let (xi, e) = (i / n, i % n);
                    let (s, a, agg) = layout.decompose(e);
                    let mut rng = stream(cfg.seed, &keys(tag::SURROGATE, xi, e, None));
                    (0..m)
                        .map(|_| {
                            let (s_next, g_next) = sur.sample_next(s, a, agg, &mut rng, sc);
                            (s_next * ng + g_next) as u32
                        })
                        .collect()
                },
            )
            .collect();
        Some(chunks.concat())
    } else {
        None
    };

    let mut q = QTable::zeros(layout.clone(), meta(env, cfg));
    let mut residuals = Vec::new();
    let mut norms = Vec::new();
    let mut converged = false;
    for t in 0..cfg.max_iterations {
        let v = q.backup_values();
        let sur = match cache {
            Some(_) => None,
            None => Some(Surrogate::new(env, &layout, cfg.surrogate, Some(&q))?),
        };
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || sur.as_ref().map(|s| s.scratch()),
                |sc, e| {
                    let mut acc = 0.0;
                    for xi in 0..xi_count {
                        let r = match &frozen_rewards {
                            Some(fr) => fr[xi * n + e],
                            None => draw_reward(xi, e, t),
                        };
                        let mut sum = 0.0;
                        match (&cache, &sur, sc.as_mut()) {
                            (Some(c), _, _) => {
                                let start = (xi * n + e) * m;
                                for &j in &c[start..start + m] {
                                    sum += v[j as usize];
                                }
                            }
                            (None, Some(sur), Some(sc)) => {
                                let (s, a, agg) = layout.decompose(e);
                                let mut rng = stream(cfg.seed, &keys(tag::SURROGATE, xi, e, sweep_key(t)));
                                for _ in 0..m {
                                    let (s_next, g_next) = sur.sample_next(s, a, agg, &mut rng, sc);
                                    sum += v[s_next * ng + g_next];
                                }
                            }
                            _ => unreachable!("either a cache or a surrogate is present"),
                        }
                        acc += r + gamma * (sum / m as f64);
                    }
                    acc / xi_count as f64
                },
            )
            .collect();
        let residual = sup_diff(&next, q.values());
        let norm = next.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        check_bound(norm, bound, t)?;
        *q.values_mut() = next;
        residuals.push(residual);
        norms.push(norm);
        q.meta.iterations = t + 1;
        q.meta.residual = residual;
        if residual < cfg.tolerance {
            converged = true;
            break;
        }
    }
    log::debug!(
        "value iteration kappa={} sweeps={} residual={:.3e}",
        cfg.kappa,
        q.meta.iterations,
        q.meta.residual
    );
    Ok(TrainOutcome {
        table: q,
        residuals,
        norms,
        converged,
    })
}

/// Empirical value iteration from `Q = 0`.
pub fn value_iteration(env: &dyn Environment, cfg: &TrainConfig) -> Result<TrainOutcome> {
    iterate(env, None, cfg)
}

/// Value iteration with random rewards: each entry averages `resamples`
/// independent reward-and-transition replicas of the empirical operator.
pub fn value_iteration_stochastic(env: &StochasticRewardEnv, cfg: &TrainConfig) -> Result<TrainOutcome> {
    iterate(env, Some(env), cfg)
}

/// Value iteration with the exact surrogate kernel (no sampling).
pub fn value_iteration_exact(env: &dyn Environment, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let gamma = env.discount();
    let layout = Arc::new(TableLayout::new(env, cfg.mode, cfg.kappa, cfg.max_table_entries)?);
    let rewards = entry_rewards(env, &layout);
    let bound = env.reward_bound() / (1.0 - gamma);
    let mut q = QTable::zeros(layout.clone(), meta(env, cfg));
    let mut residuals = Vec::new();
    let mut norms = Vec::new();
    let mut converged = false;
    for t in 0..cfg.max_iterations {
        let sur = Surrogate::new(env, &layout, cfg.surrogate, Some(&q))?.with_exact(cfg.exact_cap)?;
        let cont = exact_continuations(&sur, &q.backup_values())?;
        let next: Vec<f64> = rewards.iter().zip(&cont).map(|(r, c)| r + gamma * c).collect();
        let residual = sup_diff(&next, q.values());
        let norm = next.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        check_bound(norm, bound, t)?;
        *q.values_mut() = next;
        residuals.push(residual);
        norms.push(norm);
        q.meta.iterations = t + 1;
        q.meta.residual = residual;
        if residual < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(TrainOutcome {
        table: q,
        residuals,
        norms,
        converged,
    })
}
