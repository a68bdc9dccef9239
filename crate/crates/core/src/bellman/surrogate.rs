use rand::Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::histogram::{Histogram, HistogramIndex};

use super::table::{QTable, TableLayout};
use super::{AggregateRule, JointNeighborActions, Mode, NeighborActionRule, SurrogateConfig};

/// One draw of the surrogate kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateOutcome {
    pub next_state: usize,
    /// Next neighborhood state histogram (denominator `kappa`).
    pub next_marginal: Histogram,
    /// Next joint histogram with neighbor actions assigned by the neighbor
    /// action rule (joint mode only).
    pub next_joint: Option<Histogram>,
}

/// Exact law of one surrogate step: the focal agent's next state and,
/// independently, the rank of the neighbors' next state histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct NextDistribution {
    pub focal: Vec<f64>,
    pub neighbors: Vec<f64>,
}

/// Successor tables for building a histogram one agent at a time:
/// `next[k][r * |S| + x]` is the rank of (level-`k` histogram `r`) + `e_x`
/// at level `k + 1`.
#[derive(Debug)]
struct Convolution {
    next: Vec<Vec<u32>>,
}

impl Convolution {
    fn new(n_states: usize, kappa: u32, cap: u64) -> Result<Self> {
        let mut work: u64 = 0;
        for k in 0..kappa {
            let size = crate::histogram::histogram_count(n_states, k)?;
            work = work.saturating_add(size.saturating_mul(n_states as u64));
        }
        if work > cap {
            return Err(Error::Budget {
                what: "exact surrogate kernel",
                required: work as u128,
                cap: cap as u128,
            });
        }
        let mut next = Vec::with_capacity(kappa as usize);
        let mut counts = vec![0u32; n_states];
        for k in 0..kappa {
            let here = HistogramIndex::new(n_states, k)?;
            let there = HistogramIndex::new(n_states, k + 1)?;
            let mut table = Vec::with_capacity(here.total() * n_states);
            for r in 0..here.total() {
                here.unrank_into(r, &mut counts)?;
                for x in 0..n_states {
                    counts[x] += 1;
                    table.push(there.rank_counts(&counts) as u32);
                    counts[x] -= 1;
                }
            }
            next.push(table);
        }
        Ok(Self { next })
    }
}

/// Per-thread buffers for surrogate evaluation.
#[derive(Debug)]
pub(crate) struct Scratch {
    g_counts: Vec<u32>,
    g_pmf: Vec<f64>,
    loo: Vec<f64>,
    /// `P(. | x, u, g_x)` per neighbor cell, filled lazily.
    pmfs: Vec<f64>,
    ready: Vec<bool>,
    focal: Vec<f64>,
    next_counts: Vec<u32>,
    mix: Vec<f64>,
    cur: Vec<f64>,
    nxt: Vec<f64>,
    states: Vec<usize>,
}

impl Scratch {
    /// Focal and neighbor laws left by the last exact evaluation.
    pub(crate) fn laws(&self) -> (&[f64], &[f64]) {
        (&self.focal, &self.cur)
    }
}

/// The `(kappa + 1)`-agent surrogate behind the Bellman operators: a focal
/// agent at `(s, a)` and `kappa` exchangeable neighbors described by a table
/// aggregate.
#[derive(Debug)]
pub struct Surrogate<'a> {
    env: &'a dyn Environment,
    layout: &'a TableLayout,
    cfg: SurrogateConfig,
    /// Greedy action per `(s, rank(g))` from the table, when the rule needs it.
    greedy: Option<Vec<u16>>,
    conv: Option<Convolution>,
}

impl<'a> Surrogate<'a> {
    pub fn new(
        env: &'a dyn Environment,
        layout: &'a TableLayout,
        cfg: SurrogateConfig,
        q: Option<&QTable>,
    ) -> Result<Self> {
        if env.n_states() != layout.n_states() || env.n_actions() != layout.n_actions() {
            return Err(Error::invalid("environment and table layout dimensions differ"));
        }
        if layout.mode() == Mode::Marginal && !env.marginal_sufficient() {
            return Err(Error::invalid(
                "marginal table requires an environment that only sees the state marginal",
            ));
        }
        let greedy = match (cfg.neighbor_actions, q) {
            (NeighborActionRule::Greedy, Some(q)) => Some(q.greedy_actions()),
            (NeighborActionRule::Greedy, None) => {
                return Err(Error::invalid("greedy neighbor actions need a Q-table"))
            }
            (NeighborActionRule::Uniform, _) => None,
        };
        Ok(Self {
            env,
            layout,
            cfg,
            greedy,
            conv: None,
        })
    }

    /// Enables [`Surrogate::next_distribution`]; fails with a budget error
    /// when the convolution tables would exceed `cap` work units.
    pub fn with_exact(mut self, cap: u64) -> Result<Self> {
        self.conv = Some(Convolution::new(self.layout.n_states(), self.layout.kappa(), cap)?);
        Ok(self)
    }

    pub fn layout(&self) -> &TableLayout {
        self.layout
    }

    pub(crate) fn scratch(&self) -> Scratch {
        let ns = self.layout.n_states();
        let na = self.layout.n_actions();
        Scratch {
            g_counts: vec![0; ns],
            g_pmf: vec![0.0; ns],
            loo: vec![0.0; ns],
            pmfs: vec![0.0; ns * na * ns],
            ready: vec![false; ns * na],
            focal: vec![0.0; ns],
            next_counts: vec![0; ns],
            mix: vec![0.0; ns],
            cur: Vec::new(),
            nxt: Vec::new(),
            states: Vec::with_capacity(self.layout.kappa() as usize),
        }
    }

    fn actions_from_histogram(&self) -> bool {
        self.layout.mode() == Mode::Joint
            && self.cfg.joint_neighbor_actions == JointNeighborActions::Histogram
    }

    /// Loads the neighborhood of `(s, agg)` and the focal kernel row.
    fn prepare(&self, s: usize, a: usize, agg: usize, sc: &mut Scratch) {
        let kappa = self.layout.kappa() as f64;
        let g = self.layout.g_counts(self.layout.marginal_rank(agg));
        sc.g_counts.copy_from_slice(g);
        for (p, &c) in sc.g_pmf.iter_mut().zip(g) {
            *p = c as f64 / kappa;
        }
        sc.ready.iter_mut().for_each(|r| *r = false);
        self.env.transition(s, a, &sc.g_pmf, &mut sc.focal);
    }

    /// Kernel row of a neighbor in state `x` playing `u`, whose own view of
    /// the neighborhood follows the aggregate rule.
    fn neighbor_pmf<'s>(&self, s: usize, x: usize, u: usize, sc: &'s mut Scratch) -> &'s [f64] {
        let ns = self.layout.n_states();
        let cell = x * self.layout.n_actions() + u;
        if !sc.ready[cell] {
            let out = &mut sc.pmfs[cell * ns..(cell + 1) * ns];
            match self.cfg.aggregate {
                AggregateRule::Shared => self.env.transition(x, u, &sc.g_pmf, out),
                AggregateRule::LeaveOneOut => {
                    let kappa = self.layout.kappa() as f64;
                    for (l, &c) in sc.loo.iter_mut().zip(&sc.g_counts) {
                        *l = c as f64;
                    }
                    sc.loo[x] -= 1.0;
                    sc.loo[s] += 1.0;
                    sc.loo.iter_mut().for_each(|l| *l /= kappa);
                    self.env.transition(x, u, &sc.loo, out);
                }
            }
            sc.ready[cell] = true;
        }
        &sc.pmfs[cell * ns..(cell + 1) * ns]
    }

    /// Rank of the histogram a neighbor in state `x` sees when the focal
    /// agent is in `s` and the neighborhood counts are `counts`.
    fn view_rank(&self, s: usize, x: usize, counts: &mut [u32]) -> usize {
        let idx = self.layout.state_index();
        match self.cfg.aggregate {
            AggregateRule::Shared => idx.rank_counts(counts),
            AggregateRule::LeaveOneOut => {
                counts[x] -= 1;
                counts[s] += 1;
                let r = idx.rank_counts(counts);
                counts[s] -= 1;
                counts[x] += 1;
                r
            }
        }
    }

    fn greedy_action(&self, s: usize, x: usize, counts: &mut [u32]) -> usize {
        let table = self.greedy.as_ref().expect("greedy table present");
        let h = self.view_rank(s, x, counts);
        table[x * self.layout.n_marginals() + h] as usize
    }

    /// Draws `(s', rank(g'))` for table entry `(s, a, agg)`.
    pub(crate) fn sample_next<R: Rng + ?Sized>(
        &self,
        s: usize,
        a: usize,
        agg: usize,
        rng: &mut R,
        sc: &mut Scratch,
    ) -> (usize, usize) {
        self.prepare(s, a, agg, sc);
        let s_next = draw(&sc.focal, rng);
        sc.next_counts.iter_mut().for_each(|c| *c = 0);
        let ns = self.layout.n_states();
        let na = self.layout.n_actions();
        if self.actions_from_histogram() {
            let z = self.layout.z_counts(agg);
            for x in 0..ns {
                for u in 0..na {
                    for _ in 0..z[x * na + u] {
                        let x_next = draw(self.neighbor_pmf(s, x, u, sc), rng);
                        sc.next_counts[x_next] += 1;
                    }
                }
            }
        } else {
            let mut counts = sc.g_counts.clone();
            for x in 0..ns {
                for _ in 0..counts[x] {
                    let u = match self.cfg.neighbor_actions {
                        NeighborActionRule::Uniform => rng.random_range(0..na),
                        NeighborActionRule::Greedy => self.greedy_action(s, x, &mut counts),
                    };
                    let x_next = draw(self.neighbor_pmf(s, x, u, sc), rng);
                    sc.next_counts[x_next] += 1;
                }
            }
        }
        (s_next, self.layout.state_index().rank_counts(&sc.next_counts))
    }

    /// One full surrogate step, including next neighbor actions in joint
    /// mode.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, agg: usize, rng: &mut R) -> Result<SurrogateOutcome> {
        let mut sc = self.scratch();
        self.step_with(s, a, agg, rng, &mut sc)
    }

    pub(crate) fn step_with<R: Rng + ?Sized>(
        &self,
        s: usize,
        a: usize,
        agg: usize,
        rng: &mut R,
        sc: &mut Scratch,
    ) -> Result<SurrogateOutcome> {
        self.check_entry(s, a, agg)?;
        let (s_next, _) = self.sample_next(s, a, agg, rng, sc);
        let next_marginal = Histogram::new(sc.next_counts.clone())?;
        let next_joint = match self.layout.mode() {
            Mode::Marginal => None,
            Mode::Joint => {
                let ns = self.layout.n_states();
                let na = self.layout.n_actions();
                let mut counts = sc.next_counts.clone();
                let mut z = vec![0u32; ns * na];
                for x in 0..ns {
                    for _ in 0..counts[x] {
                        let u = match self.cfg.neighbor_actions {
                            NeighborActionRule::Uniform => rng.random_range(0..na),
                            NeighborActionRule::Greedy => self.greedy_action(s_next, x, &mut counts),
                        };
                        z[x * na + u] += 1;
                    }
                }
                Some(Histogram::joint(ns, na, z)?)
            }
        };
        Ok(SurrogateOutcome {
            next_state: s_next,
            next_marginal,
            next_joint,
        })
    }

    pub(crate) fn check_entry(&self, s: usize, a: usize, agg: usize) -> Result<()> {
        let l = self.layout;
        for (i, n) in [(s, l.n_states()), (a, l.n_actions()), (agg, l.n_aggregates())] {
            if i >= n {
                return Err(Error::OutOfRange { index: i, total: n });
            }
        }
        Ok(())
    }

    /// Exact law of `(s', g')` for entry `(s, a, agg)`. Requires
    /// [`Surrogate::with_exact`].
    pub fn next_distribution(&self, s: usize, a: usize, agg: usize) -> Result<NextDistribution> {
        self.check_entry(s, a, agg)?;
        let mut sc = self.scratch();
        self.fill_distribution(s, a, agg, &mut sc)?;
        Ok(NextDistribution {
            focal: sc.focal.clone(),
            neighbors: sc.cur.clone(),
        })
    }

    /// Leaves the focal law in `sc.focal` and the neighbor histogram law
    /// (indexed by state-histogram rank) in `sc.cur`.
    pub(crate) fn fill_distribution(&self, s: usize, a: usize, agg: usize, sc: &mut Scratch) -> Result<()> {
        let conv = self
            .conv
            .as_ref()
            .ok_or_else(|| Error::invalid("exact kernel not enabled on this surrogate"))?;
        self.prepare(s, a, agg, sc);
        let ns = self.layout.n_states();
        let na = self.layout.n_actions();

        // neighbor list as (state, action or None for a uniform mixture)
        sc.states.clear();
        let mut cells: Vec<(usize, Option<usize>)> = Vec::with_capacity(self.layout.kappa() as usize);
        if self.actions_from_histogram() {
            let z = self.layout.z_counts(agg);
            for x in 0..ns {
                for u in 0..na {
                    for _ in 0..z[x * na + u] {
                        cells.push((x, Some(u)));
                    }
                }
            }
        } else {
            let mut counts = sc.g_counts.clone();
            for x in 0..ns {
                for _ in 0..counts[x] {
                    let u = match self.cfg.neighbor_actions {
                        NeighborActionRule::Uniform => None,
                        NeighborActionRule::Greedy => Some(self.greedy_action(s, x, &mut counts)),
                    };
                    cells.push((x, u));
                }
            }
        }

        sc.cur.clear();
        sc.cur.push(1.0);
        for (k, &(x, u)) in cells.iter().enumerate() {
            match u {
                Some(u) => {
                    let row = self.neighbor_pmf(s, x, u, sc).to_vec();
                    sc.mix.copy_from_slice(&row);
                }
                None => {
                    let mut mix = vec![0.0; ns];
                    for u in 0..na {
                        for (m, p) in mix.iter_mut().zip(self.neighbor_pmf(s, x, u, sc)) {
                            *m += p;
                        }
                    }
                    for (dst, m) in sc.mix.iter_mut().zip(mix) {
                        *dst = m / na as f64;
                    }
                }
            }
            let succ = &conv.next[k];
            let size_next = if k + 1 < conv.next.len() {
                conv.next[k + 1].len() / ns
            } else {
                self.layout.n_marginals()
            };
            sc.nxt.clear();
            sc.nxt.resize(size_next, 0.0);
            for (r, &p) in sc.cur.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (x_next, &w) in sc.mix.iter().enumerate() {
                    if w != 0.0 {
                        sc.nxt[succ[r * ns + x_next] as usize] += p * w;
                    }
                }
            }
            std::mem::swap(&mut sc.cur, &mut sc.nxt);
        }
        Ok(())
    }
}

/// Inverse-CDF draw from a pmf; falls back to the last cell with mass when
/// rounding leaves the uniform above the final partial sum.
#[inline]
pub(crate) fn draw<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in pmf.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One surrogate step from a table entry given as histograms.
pub fn surrogate_step<R: Rng + ?Sized>(
    env: &dyn Environment,
    q: &QTable,
    cfg: SurrogateConfig,
    s: usize,
    a: usize,
    aggregate: &Histogram,
    rng: &mut R,
) -> Result<SurrogateOutcome> {
    let layout = q.layout();
    let agg = layout.aggregate_rank(aggregate)?;
    Surrogate::new(env, layout, cfg, Some(q))?.step(s, a, agg, rng)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::bellman::table::QMeta;
    use crate::env::{TabularEnv, WarehouseEnv};
    use crate::rng::stream;

    #[test]
    fn distribution_sums_to_one() {
        let env = WarehouseEnv::default();
        let layout = TableLayout::new(&env, Mode::Marginal, 6, u64::MAX).unwrap();
        let sur = Surrogate::new(&env, &layout, SurrogateConfig::default(), None)
            .unwrap()
            .with_exact(1_000_000)
            .unwrap();
        for agg in [0, 5, 27] {
            let d = sur.next_distribution(2, 2, agg).unwrap();
            assert_eq!(d.neighbors.len(), layout.n_marginals());
            assert!((d.neighbors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((d.focal.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_budget_is_enforced() {
        let env = WarehouseEnv::default();
        let layout = TableLayout::new(&env, Mode::Marginal, 24, u64::MAX).unwrap();
        let sur = Surrogate::new(&env, &layout, SurrogateConfig::default(), None).unwrap();
        assert!(matches!(sur.with_exact(100), Err(Error::Budget { .. })));
    }

    #[test]
    fn step_shapes() {
        let env = TabularEnv::small();
        let layout = Arc::new(TableLayout::new(&env, Mode::Joint, 2, u64::MAX).unwrap());
        let q = QTable::zeros(
            layout.clone(),
            QMeta {
                gamma: 0.9,
                env_name: env_name(&env),
                seed: 0,
                iterations: 0,
                residual: 0.0,
            },
        );
        let z = Histogram::joint(2, 2, vec![1, 0, 0, 1]).unwrap();
        let mut rng = stream(1, &[]);
        let out = surrogate_step(&env, &q, SurrogateConfig::default(), 0, 1, &z, &mut rng).unwrap();
        assert!(out.next_state < 2);
        assert_eq!(out.next_marginal.kappa(), 2);
        assert_eq!(out.next_joint.unwrap().kappa(), 2);
    }

    fn env_name(env: &dyn Environment) -> String {
        env.name().to_string()
    }

    #[test]
    fn greedy_rule_needs_table() {
        let env = WarehouseEnv::default();
        let layout = TableLayout::new(&env, Mode::Marginal, 2, u64::MAX).unwrap();
        let cfg = SurrogateConfig {
            neighbor_actions: NeighborActionRule::Greedy,
            ..Default::default()
        };
        assert!(Surrogate::new(&env, &layout, cfg, None).is_err());
    }
}
