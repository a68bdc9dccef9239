//! Decentralized execution: every agent samples `kappa` neighbors from its
//! normalized graphon row, forms the empirical state histogram, and acts
//! greedily on the learned table. Rewards and transitions use each agent's
//! exact weighted marginal.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::QTable;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::graphon::WeightMatrix;
use crate::histogram::{tv_distance, Histogram};
use crate::rng::{derive_seed, stream, tag};
use crate::sampler::{exact_marginal_into, NeighborSampler};

/// Greedy policy read off a table: `argmax_a max_{z in fiber(g)} Q(s, a, z)`.
#[derive(Clone, Copy, Debug)]
pub struct Policy<'q> {
    q: &'q QTable,
}

impl<'q> Policy<'q> {
    pub fn new(q: &'q QTable, env: &dyn Environment) -> Result<Self> {
        q.check_compatible(env)?;
        Ok(Self { q })
    }

    pub fn table(&self) -> &QTable {
        self.q
    }

    /// Action for state `s` given the observed neighbor state histogram.
    pub fn act(&self, s: usize, observed: &Histogram) -> Result<usize> {
        let layout = self.q.layout();
        if s >= layout.n_states() {
            return Err(Error::OutOfRange {
                index: s,
                total: layout.n_states(),
            });
        }
        let g = layout.state_index().rank(observed)?;
        Ok(self.q.greedy(s, g).0)
    }

    #[inline]
    fn act_counts(&self, s: usize, counts: &[u32]) -> usize {
        let g = self.q.layout().state_index().rank_counts(counts);
        self.q.greedy(s, g).0
    }
}

/// How each agent forms the histogram it acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observation {
    /// `kappa` neighbors drawn i.i.d. from the normalized row.
    #[default]
    Sampled,
    /// Exact weighted marginal rounded to the nearest grid point
    /// (largest remainder). Diagnostic baseline.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStates {
    /// Every agent starts in this state.
    All(usize),
    Explicit(Vec<usize>),
    /// Uniform over states, drawn from the episode seed.
    Random,
}

impl Default for InitialStates {
    fn default() -> Self {
        InitialStates::All(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionConfig {
    pub horizon: usize,
    pub observation: Observation,
    pub initial: InitialStates,
    /// Record the mean TV distance between observed and exact marginals.
    pub track_aggregate_error: bool,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            observation: Observation::Sampled,
            initial: InitialStates::default(),
            track_aggregate_error: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    /// `sum_t gamma^t rbar_t`.
    pub discounted_return: f64,
    /// Team reward per step.
    pub team_rewards: Vec<f64>,
    pub final_states: Vec<usize>,
    /// Mean over agents of `TV(observed, exact)` per step, when tracked.
    pub aggregate_tv: Option<Vec<f64>>,
}

fn initial_states(init: &InitialStates, n: usize, n_states: usize, seed: u64) -> Result<Vec<usize>> {
    let states = match init {
        InitialStates::All(s) => vec![*s; n],
        InitialStates::Explicit(v) => {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "initial states",
                    expected: n,
                    found: v.len(),
                });
            }
            v.clone()
        }
        InitialStates::Random => {
            let mut rng = stream(seed, &[tag::INIT]);
            (0..n).map(|_| rng.random_range(0..n_states)).collect()
        }
    };
    if let Some(&bad) = states.iter().find(|&&s| s >= n_states) {
        return Err(Error::OutOfRange {
            index: bad,
            total: n_states,
        });
    }
    Ok(states)
}

/// One `horizon`-step episode of the n-agent system. Agent `i` at step `t`
/// draws from streams keyed by `(seed, t, i)`, so the result does not depend
/// on the thread count.
pub fn run_episode(
    env: &dyn Environment,
    weights: &WeightMatrix,
    q: &QTable,
    cfg: &ExecutionConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    let policy = Policy::new(q, env)?;
    let n = weights.n();
    let ns = env.n_states();
    let kappa = q.kappa();
    let gamma = env.discount();
    let sampler = NeighborSampler::new(weights)?;
    let mut states = initial_states(&cfg.initial, n, ns, seed)?;
    let mut team_rewards = Vec::with_capacity(cfg.horizon);
    let mut aggregate_tv = cfg.track_aggregate_error.then(Vec::new);
    let mut ret = 0.0;
    let mut discount = 1.0;

    struct AgentStep {
        reward: f64,
        next: usize,
        tv: f64,
    }

    for t in 0..cfg.horizon {
        let current = &states;
        let steps: Vec<Result<AgentStep>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; ns];
                exact_marginal_into(weights, i, current, &mut g);
                let counts = match cfg.observation {
                    Observation::Sampled => {
                        let mut rng = stream(seed, &[tag::NEIGHBORS, t as u64, i as u64]);
                        let mut idx = vec![0usize; kappa as usize];
                        sampler.sample_into(i, &mut idx, &mut rng);
                        let mut c = vec![0u32; ns];
                        for j in idx {
                            c[current[j]] += 1;
                        }
                        c
                    }
                    Observation::Exact => Histogram::round_from_pmf(&g, kappa)?.counts().to_vec(),
                };
                let a = policy.act_counts(current[i], &counts);
                let reward = env.reward(current[i], a, &g);
                let mut p = vec![0.0; ns];
                env.transition(current[i], a, &g, &mut p);
                let mut rng = stream(seed, &[tag::TRANSITION, t as u64, i as u64]);
                let next = crate::bellman::draw_state(&p, &mut rng);
                let tv = if cfg.track_aggregate_error {
                    let observed: Vec<f64> = counts.iter().map(|&c| c as f64 / kappa as f64).collect();
                    tv_distance(&observed, &g)?
                } else {
                    0.0
                };
                Ok(AgentStep { reward, next, tv })
            })
            .collect();
        let mut total = 0.0;
        let mut tv_total = 0.0;
        let mut next = Vec::with_capacity(n);
        for step in steps {
            let step = step?;
            total += step.reward;
            tv_total += step.tv;
            next.push(step.next);
        }
        let team = total / n as f64;
        team_rewards.push(team);
        if let Some(v) = aggregate_tv.as_mut() {
            v.push(tv_total / n as f64);
        }
        ret += discount * team;
        discount *= gamma;
        states = next;
    }
    Ok(EpisodeResult {
        discounted_return: ret,
        team_rewards,
        final_states: states,
        aggregate_tv,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean: f64,
    /// Standard error of the mean across episodes.
    pub stderr: f64,
    pub returns: Vec<f64>,
}

/// Seed of episode `k` under a master seed.
pub fn episode_seed(master: u64, k: usize) -> u64 {
    derive_seed(master, &[k as u64])
}

/// Mean discounted return over `episodes` independent episodes.
pub fn evaluate_policy(
    env: &dyn Environment,
    weights: &WeightMatrix,
    q: &QTable,
    cfg: &ExecutionConfig,
    episodes: usize,
    master_seed: u64,
) -> Result<Evaluation> {
    if episodes == 0 {
        return Err(Error::invalid("at least one episode is required"));
    }
    let returns = (0..episodes)
        .into_par_iter()
        .map(|k| run_episode(env, weights, q, cfg, episode_seed(master_seed, k)).map(|r| r.discounted_return))
        .collect::<Result<Vec<f64>>>()?;
    let (mean, stderr) = mean_stderr(&returns);
    Ok(Evaluation { mean, stderr, returns })
}

/// Sample mean and standard error (zero for a single value).
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let mean = x.iter().sum::<f64>() / k;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_stderr_small() {
        let (m, se) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
        assert_eq!(mean_stderr(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn initial_state_validation() {
        assert!(initial_states(&InitialStates::All(3), 4, 3, 0).is_err());
        assert!(initial_states(&InitialStates::Explicit(vec![0, 1]), 3, 3, 0).is_err());
        let r = initial_states(&InitialStates::Random, 50, 3, 9).unwrap();
        assert_eq!(r, initial_states(&InitialStates::Random, 50, 3, 9).unwrap());
    }
}
