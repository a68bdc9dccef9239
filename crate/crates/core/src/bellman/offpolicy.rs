use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

use super::operator::aggregate_pmf;
use super::surrogate::{draw, Surrogate};
use super::table::{QMeta, QTable, TableLayout};
use super::{NeighborActionRule, SurrogateConfig};

/// One logged surrogate transition, aggregates given by rank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub aggregate: usize,
    pub reward: f64,
    pub next_state: usize,
    /// Rank of the next neighborhood state histogram.
    pub next_marginal: usize,
}

/// `Q(s, a, h) <- (1 - alpha) Q(s, a, h) + alpha (r + gamma max_{a', h' in fiber(g')} Q(s', a', h'))`.
/// Returns the updated value.
pub fn off_policy_update(q: &mut QTable, tr: &Transition, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("learning rate {alpha} outside (0, 1]")));
    }
    let l = q.layout().clone();
    for (i, n) in [
        (tr.state, l.n_states()),
        (tr.action, l.n_actions()),
        (tr.aggregate, l.n_aggregates()),
        (tr.next_state, l.n_states()),
        (tr.next_marginal, l.n_marginals()),
    ] {
        if i >= n {
            return Err(Error::OutOfRange { index: i, total: n });
        }
    }
    if !tr.reward.is_finite() {
        return Err(Error::invalid("non-finite reward"));
    }
    let target = tr.reward + q.meta.gamma * q.backup(tr.next_state, tr.next_marginal);
    let idx = l.index(tr.state, tr.action, tr.aggregate);
    let values = q.values_mut();
    values[idx] = (1.0 - alpha) * values[idx] + alpha * target;
    Ok(values[idx])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRate {
    Constant(f64),
    /// `alpha = visits^(-power)` per entry.
    Visits { power: f64 },
}

impl LearningRate {
    fn at(&self, visits: u64) -> f64 {
        match *self {
            LearningRate::Constant(a) => a,
            LearningRate::Visits { power } => (visits as f64).powf(-power),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LearningRate::Constant(a) => a > 0.0 && a <= 1.0,
            LearningRate::Visits { power } => power > 0.5 && power <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid learning rate {self:?}")))
        }
    }
}

/// Action distribution of the data-collecting policy.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorPolicy {
    #[default]
    Uniform,
    /// Same strictly positive pmf over actions everywhere.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffPolicyConfig {
    pub steps: usize,
    /// Steps before restarting from a uniformly drawn `(s, h)`.
    pub trajectory_length: usize,
    pub rate: LearningRate,
    pub behavior: BehaviorPolicy,
    pub seed: u64,
    pub surrogate: SurrogateConfig,
}

impl OffPolicyConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            trajectory_length: 20,
            rate: LearningRate::Visits { power: 0.6 },
            behavior: BehaviorPolicy::Uniform,
            seed: 0,
            surrogate: SurrogateConfig::default(),
        }
    }
}

/// Tabular Q-learning on surrogate trajectories from a fixed behavior
/// policy, starting at `Q = 0`.
pub fn off_policy_learn(env: &dyn Environment, layout: Arc<TableLayout>, cfg: &OffPolicyConfig) -> Result<QTable> {
    cfg.rate.validate()?;
    if cfg.trajectory_length == 0 {
        return Err(Error::invalid("trajectory length must be at least 1"));
    }
    if cfg.surrogate.neighbor_actions == NeighborActionRule::Greedy {
        return Err(Error::invalid("off-policy learning needs the uniform neighbor action rule"));
    }
    let na = layout.n_actions();
    let behavior = match &cfg.behavior {
        BehaviorPolicy::Uniform => vec![1.0 / na as f64; na],
        BehaviorPolicy::Fixed(p) => {
            if p.len() != na {
                return Err(Error::DimensionMismatch {
                    what: "behavior policy length",
                    expected: na,
                    found: p.len(),
                });
            }
            crate::histogram::validate_pmf(p, 1e-9)?;
            if p.iter().any(|&x| x <= 0.0) {
                return Err(Error::invalid("behavior policy must give every action positive mass"));
            }
            p.clone()
        }
    };
    let sur = Surrogate::new(env, &layout, cfg.surrogate, None)?;
    let mut sc = sur.scratch();
    let mut q = QTable::zeros(
        layout.clone(),
        QMeta {
            gamma: env.discount(),
            env_name: env.name().to_string(),
            seed: cfg.seed,
            iterations: 0,
            residual: f64::NAN,
        },
    );
    let mut visits = vec![0u64; layout.len()];
    let mut rng = stream(cfg.seed, &[tag::OFF_POLICY]);
    let (mut s, mut agg) = (0, 0);
    for step in 0..cfg.steps {
        if step % cfg.trajectory_length == 0 {
            s = rng.random_range(0..layout.n_states());
            agg = rng.random_range(0..layout.n_aggregates());
        }
        let a = draw(&behavior, &mut rng);
        let reward = env.reward(s, a, &aggregate_pmf(&layout, agg));
        let out = sur.step_with(s, a, agg, &mut rng, &mut sc)?;
        let g_next = layout.state_index().rank(&out.next_marginal)?;
        let idx = layout.index(s, a, agg);
        visits[idx] += 1;
        let tr = Transition {
            state: s,
            action: a,
            aggregate: agg,
            reward,
            next_state: out.next_state,
            next_marginal: g_next,
        };
        off_policy_update(&mut q, &tr, cfg.rate.at(visits[idx]))?;
        s = out.next_state;
        agg = match &out.next_joint {
            Some(z) => layout.aggregate_rank(z)?,
            None => g_next,
        };
    }
    q.meta.iterations = cfg.steps;
    Ok(q)
}
