//! Offline learning on the `(kappa + 1)`-agent surrogate.
//!
//! The Q-function is indexed by the focal agent's state and action and by a
//! neighborhood histogram with denominator `kappa`: a joint state-action
//! histogram ([`Mode::Joint`]) or, when the environment only sees neighbors
//! through their state marginal, a state histogram ([`Mode::Marginal`]).
//!
//! The backup maximizes over the next action and over every joint histogram
//! compatible with the next state marginal (its fiber). In marginal mode the
//! fiber collapses and only the action is maximized.

mod io;
mod iteration;
mod offpolicy;
mod operator;
mod surrogate;
mod table;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_qtable, save_qtable, MAGIC};
pub use iteration::{
    value_iteration, value_iteration_exact, value_iteration_stochastic, SampleSchedule, TrainConfig,
    TrainOutcome,
};
pub use offpolicy::{
    off_policy_learn, off_policy_update, BehaviorPolicy, LearningRate, OffPolicyConfig, Transition,
};
pub use operator::{empirical_operator, exact_operator};
pub use surrogate::{surrogate_step, NextDistribution, Surrogate, SurrogateOutcome};
pub use table::{fiber_backup, QMeta, QTable, TableLayout};

pub(crate) use surrogate::draw as draw_state;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Joint,
    Marginal,
}

/// Which neighborhood marginal each surrogate neighbor transitions under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateRule {
    /// The other `kappa` agents (focal included, itself excluded).
    #[default]
    LeaveOneOut,
    /// Everyone uses the focal agent's marginal.
    Shared,
}

/// How surrogate neighbors pick actions when the table index does not fix
/// them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborActionRule {
    /// Greedy with respect to the current table, lowest index on ties.
    Greedy,
    #[default]
    Uniform,
}

/// Source of the current neighbor actions in joint mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointNeighborActions {
    /// Read from the joint histogram in the table index.
    #[default]
    Histogram,
    /// Drawn by the neighbor action rule, as in marginal mode.
    Rule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub aggregate: AggregateRule,
    pub neighbor_actions: NeighborActionRule,
    pub joint_neighbor_actions: JointNeighborActions,
}

/// Monte-Carlo sample size that keeps the Bellman noise below
/// `1 / (5 sqrt(kappa))` with high probability:
///
/// `m* = 25 kappa^2 gamma^2 / (1 - gamma)^4 * ||r||^2 * ln(200 |S|^2 |A|^2 kappa^(|S||A|))`,
/// rounded up, and at least 1.
pub fn sample_budget(
    kappa: u32,
    gamma: f64,
    reward_bound: f64,
    n_states: usize,
    n_actions: usize,
) -> Result<u64> {
    if kappa == 0 || n_states == 0 || n_actions == 0 {
        return Err(Error::invalid("sample budget needs positive kappa, |S| and |A|"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("discount {gamma} outside (0, 1)")));
    }
    if !(reward_bound > 0.0 && reward_bound.is_finite()) {
        return Err(Error::invalid("reward bound must be positive and finite"));
    }
    let (k, s, a) = (kappa as f64, n_states as f64, n_actions as f64);
    let log_term = 200f64.ln() + 2.0 * s.ln() + 2.0 * a.ln() + s * a * k.ln();
    let m = 25.0 * k * k * gamma * gamma / (1.0 - gamma).powi(4) * reward_bound * reward_bound * log_term;
    if !m.is_finite() || m >= u64::MAX as f64 {
        return Err(Error::Overflow("sample budget"));
    }
    Ok((m.ceil() as u64).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_reference_value() {
        // 100 * ln 200 = 529.83
        assert_eq!(sample_budget(1, 0.5, 1.0, 1, 1).unwrap(), 530);
    }

    #[test]
    fn budget_is_monotone_in_kappa() {
        let mut prev = 0;
        for k in 1..60 {
            let m = sample_budget(k, 0.9, 2.0, 3, 3).unwrap();
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn budget_small_gamma_floors_at_one() {
        assert_eq!(sample_budget(1, 1e-9, 1.0, 1, 1).unwrap(), 1);
    }

    #[test]
    fn budget_errors() {
        assert!(sample_budget(0, 0.5, 1.0, 1, 1).is_err());
        assert!(sample_budget(1, 1.0, 1.0, 1, 1).is_err());
        assert!(matches!(
            sample_budget(u32::MAX, 1.0 - 1e-12, 1e100, 100, 100),
            Err(Error::Overflow(_))
        ));
    }
}
