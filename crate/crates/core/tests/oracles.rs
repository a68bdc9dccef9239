//! Independent re-derivations of the surrogate kernel, the Bellman backup
//! and the operators, checked against the library.

use std::collections::BTreeMap;
use std::sync::Arc;

use gmfs_core::bellman::{
    empirical_operator, exact_operator, fiber_backup, AggregateRule, JointNeighborActions, Mode,
    NeighborActionRule, QMeta, QTable, Surrogate, SurrogateConfig, TableLayout,
};
use gmfs_core::env::{Environment, TabularEnv, WarehouseEnv};
use gmfs_core::histogram::Histogram;
use gmfs_core::rng::stream;
use rand::Rng;

fn meta(env: &dyn Environment) -> QMeta {
    QMeta {
        gamma: env.discount(),
        env_name: env.name().to_string(),
        seed: 0,
        iterations: 0,
        residual: 0.0,
    }
}

fn random_table(env: &dyn Environment, layout: &Arc<TableLayout>, seed: u64) -> QTable {
    let mut rng = stream(seed, &[99]);
    let values = (0..layout.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
    QTable::from_values(layout.clone(), values, meta(env)).unwrap()
}

/// Law of (s', next neighbor counts) by enumerating every neighbor action
/// completion and every joint next-state outcome.
fn brute_force_kernel(
    env: &dyn Environment,
    s: usize,
    a: usize,
    aggregate: &Histogram,
    mode: Mode,
    cfg: SurrogateConfig,
) -> BTreeMap<(usize, Vec<u32>), f64> {
    let ns = env.n_states();
    let na = env.n_actions();
    let kappa = aggregate.kappa() as usize;
    // neighbor states and, when fixed, actions
    let mut nbr_states = Vec::new();
    let mut nbr_actions = Vec::new();
    let mut g_counts = vec![0u32; ns];
    match mode {
        Mode::Joint => {
            for (cell, &c) in aggregate.counts().iter().enumerate() {
                for _ in 0..c {
                    nbr_states.push(cell / na);
                    nbr_actions.push(Some(cell % na));
                    g_counts[cell / na] += 1;
                }
            }
            if cfg.joint_neighbor_actions == JointNeighborActions::Rule {
                nbr_actions.iter_mut().for_each(|u| *u = None);
            }
        }
        Mode::Marginal => {
            for (x, &c) in aggregate.counts().iter().enumerate() {
                for _ in 0..c {
                    nbr_states.push(x);
                    nbr_actions.push(None);
                    g_counts[x] += 1;
                }
            }
        }
    }
    let g: Vec<f64> = g_counts.iter().map(|&c| c as f64 / kappa as f64).collect();
    let view = |x: usize| -> Vec<f64> {
        match cfg.aggregate {
            AggregateRule::Shared => g.clone(),
            AggregateRule::LeaveOneOut => {
                let mut c: Vec<f64> = g_counts.iter().map(|&c| c as f64).collect();
                c[x] -= 1.0;
                c[s] += 1.0;
                c.iter().map(|v| v / kappa as f64).collect()
            }
        }
    };
    let mut focal = vec![0.0; ns];
    env.transition(s, a, &g, &mut focal);

    // action completions
    let free: Vec<usize> = (0..kappa).filter(|&m| nbr_actions[m].is_none()).collect();
    let completions = na.pow(free.len() as u32);
    let mut law = BTreeMap::new();
    for code in 0..completions {
        let mut acts: Vec<usize> = nbr_actions.iter().map(|u| u.unwrap_or(0)).collect();
        let mut c = code;
        for &m in &free {
            acts[m] = c % na;
            c /= na;
        }
        let w_actions = 1.0 / completions as f64;
        let rows: Vec<Vec<f64>> = (0..kappa)
            .map(|m| {
                let mut p = vec![0.0; ns];
                env.transition(nbr_states[m], acts[m], &view(nbr_states[m]), &mut p);
                p
            })
            .collect();
        let outcomes = ns.pow(kappa as u32 + 1);
        for code in 0..outcomes {
            let mut c = code;
            let s_next = c % ns;
            c /= ns;
            let mut p = w_actions * focal[s_next];
            let mut counts = vec![0u32; ns];
            for row in &rows {
                let x = c % ns;
                c /= ns;
                p *= row[x];
                counts[x] += 1;
            }
            if p > 0.0 {
                *law.entry((s_next, counts)).or_insert(0.0) += p;
            }
        }
    }
    law
}

fn library_kernel(sur: &Surrogate<'_>, layout: &TableLayout, s: usize, a: usize, agg: usize) -> BTreeMap<(usize, Vec<u32>), f64> {
    let d = sur.next_distribution(s, a, agg).unwrap();
    let mut law = BTreeMap::new();
    for (s_next, &pf) in d.focal.iter().enumerate() {
        for (g, &pn) in d.neighbors.iter().enumerate() {
            if pf * pn > 0.0 {
                let counts = layout.state_index().unrank_counts(g).unwrap();
                law.insert((s_next, counts), pf * pn);
            }
        }
    }
    law
}

fn assert_laws_match(a: &BTreeMap<(usize, Vec<u32>), f64>, b: &BTreeMap<(usize, Vec<u32>), f64>, tol: f64) {
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    for k in keys {
        let x = a.get(k).copied().unwrap_or(0.0);
        let y = b.get(k).copied().unwrap_or(0.0);
        assert!((x - y).abs() <= tol, "outcome {k:?}: brute force {x}, library {y}");
    }
}

fn configs() -> Vec<SurrogateConfig> {
    let mut out = Vec::new();
    for aggregate in [AggregateRule::LeaveOneOut, AggregateRule::Shared] {
        for joint in [JointNeighborActions::Histogram, JointNeighborActions::Rule] {
            out.push(SurrogateConfig {
                aggregate,
                neighbor_actions: NeighborActionRule::Uniform,
                joint_neighbor_actions: joint,
            });
        }
    }
    out
}

#[test]
fn exact_kernel_matches_enumeration_small_instance() {
    let env = TabularEnv::small();
    for mode in [Mode::Joint, Mode::Marginal] {
        for kappa in 1..=3 {
            let layout = TableLayout::new(&env, mode, kappa, u64::MAX).unwrap();
            for cfg in configs() {
                let sur = Surrogate::new(&env, &layout, cfg, None).unwrap().with_exact(1 << 20).unwrap();
                for e in 0..layout.len() {
                    let (s, a, agg) = layout.decompose(e);
                    let h = layout.aggregate(agg).unwrap();
                    let bf = brute_force_kernel(&env, s, a, &h, mode, cfg);
                    assert_laws_match(&bf, &library_kernel(&sur, &layout, s, a, agg), 1e-12);
                }
            }
        }
    }
}

#[test]
fn exact_kernel_matches_enumeration_warehouse() {
    let env = WarehouseEnv::default();
    let layout = TableLayout::new(&env, Mode::Marginal, 4, u64::MAX).unwrap();
    for cfg in configs().into_iter().step_by(2) {
        let sur = Surrogate::new(&env, &layout, cfg, None).unwrap().with_exact(1 << 20).unwrap();
        for e in (0..layout.len()).step_by(7) {
            let (s, a, agg) = layout.decompose(e);
            let h = layout.aggregate(agg).unwrap();
            let bf = brute_force_kernel(&env, s, a, &h, Mode::Marginal, cfg);
            assert_laws_match(&bf, &library_kernel(&sur, &layout, s, a, agg), 1e-12);
        }
    }
}

#[test]
fn sampled_kernel_is_within_tv_of_exact() {
    let cases: Vec<(Box<dyn Environment>, Mode, u32)> = vec![
        (Box::new(TabularEnv::small()), Mode::Joint, 2),
        (Box::new(WarehouseEnv::default()), Mode::Marginal, 2),
    ];
    let draws = 100_000;
    for (env, mode, kappa) in cases {
        let layout = Arc::new(TableLayout::new(env.as_ref(), mode, kappa, u64::MAX).unwrap());
        let q = QTable::zeros(layout.clone(), meta(env.as_ref()));
        let cfg = SurrogateConfig::default();
        let sur = Surrogate::new(env.as_ref(), &layout, cfg, Some(&q)).unwrap().with_exact(1 << 20).unwrap();
        for e in [0, layout.len() / 2, layout.len() - 1] {
            let (s, a, agg) = layout.decompose(e);
            let exact = library_kernel(&sur, &layout, s, a, agg);
            let mut rng = stream(17, &[e as u64]);
            let mut counts: BTreeMap<(usize, Vec<u32>), f64> = BTreeMap::new();
            for _ in 0..draws {
                let out = sur.step(s, a, agg, &mut rng).unwrap();
                *counts.entry((out.next_state, out.next_marginal.counts().to_vec())).or_insert(0.0) += 1.0 / draws as f64;
            }
            let keys: std::collections::BTreeSet<_> = exact.keys().chain(counts.keys()).collect();
            let tv: f64 = keys
                .into_iter()
                .map(|k| (exact.get(k).copied().unwrap_or(0.0) - counts.get(k).copied().unwrap_or(0.0)).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv <= 0.01, "{} entry {e}: TV {tv}", env.name());
        }
    }
}

/// `max_{a', z' : marginal(z') = g'} Q(s', a', z')` by scanning every table
/// aggregate.
fn brute_backup(q: &QTable, s: usize, g: &[u32]) -> f64 {
    let l = q.layout();
    let mut best = f64::NEG_INFINITY;
    for agg in 0..l.n_aggregates() {
        let h = l.aggregate(agg).unwrap();
        let marginal: Vec<u32> = match l.mode() {
            Mode::Marginal => h.counts().to_vec(),
            Mode::Joint => h
                .counts()
                .chunks(l.n_actions())
                .map(|c| c.iter().sum())
                .collect(),
        };
        if marginal == g {
            for a in 0..l.n_actions() {
                best = best.max(q.get(s, a, agg));
            }
        }
    }
    best
}

#[test]
fn fiber_backup_matches_scan() {
    let env = TabularEnv::small();
    for (mode, kappa) in [(Mode::Joint, 1), (Mode::Joint, 3), (Mode::Marginal, 4)] {
        let layout = Arc::new(TableLayout::new(&env, mode, kappa, u64::MAX).unwrap());
        let q = random_table(&env, &layout, kappa as u64);
        for g in 0..layout.n_marginals() {
            let h = layout.state_index().unrank(g).unwrap();
            for s in 0..2 {
                assert_eq!(fiber_backup(&q, s, &h).unwrap(), brute_backup(&q, s, h.counts()));
            }
        }
    }
}

#[test]
fn exact_operator_matches_enumeration() {
    let env = TabularEnv::small();
    for mode in [Mode::Joint, Mode::Marginal] {
        let layout = Arc::new(TableLayout::new(&env, mode, 2, u64::MAX).unwrap());
        let q = random_table(&env, &layout, 5);
        let cfg = SurrogateConfig::default();
        let t = exact_operator(&env, &q, cfg, 1 << 20).unwrap();
        for e in 0..layout.len() {
            let (s, a, agg) = layout.decompose(e);
            let h = layout.aggregate(agg).unwrap();
            let law = brute_force_kernel(&env, s, a, &h, mode, cfg);
            let g = gmfs_core::histogram::Histogram::new(match mode {
                Mode::Marginal => h.counts().to_vec(),
                Mode::Joint => h.counts().chunks(2).map(|c| c.iter().sum()).collect(),
            })
            .unwrap();
            let mut expect = env.reward(s, a, &g.pmf());
            for ((s_next, counts), p) in &law {
                expect += env.discount() * p * brute_backup(&q, *s_next, counts);
            }
            assert!((t.values()[e] - expect).abs() < 1e-12, "entry {e}: {} vs {expect}", t.values()[e]);
        }
    }
}

#[test]
fn empirical_operator_is_unbiased() {
    // mean of independent replications vs the exact operator, 5 sigma per entry
    let env = TabularEnv::small();
    let layout = Arc::new(TableLayout::new(&env, Mode::Joint, 2, u64::MAX).unwrap());
    let q = random_table(&env, &layout, 8);
    let cfg = SurrogateConfig::default();
    let exact = exact_operator(&env, &q, cfg, 1 << 20).unwrap();
    let reps = 400;
    let m = 20;
    let mut sum = vec![0.0; layout.len()];
    let mut sumsq = vec![0.0; layout.len()];
    for r in 0..reps {
        let t = empirical_operator(&env, &q, cfg, m, 1000 + r).unwrap();
        for (i, v) in t.values().iter().enumerate() {
            sum[i] += v;
            sumsq[i] += v * v;
        }
    }
    let k = reps as f64;
    for i in 0..layout.len() {
        let mean = sum[i] / k;
        let var = (sumsq[i] - k * mean * mean) / (k - 1.0);
        let se = (var.max(0.0) / k).sqrt();
        let err = (mean - exact.values()[i]).abs();
        assert!(err <= 5.0 * se + 1e-12, "entry {i}: |{mean} - {}| > 5 * {se}", exact.values()[i]);
    }
}

#[test]
fn greedy_rule_kernel_uses_table_actions() {
    // Under the greedy rule every free neighbor plays the table's argmax at
    // its own view; enumerate with those actions fixed.
    let env = TabularEnv::small();
    let layout = Arc::new(TableLayout::new(&env, Mode::Marginal, 2, u64::MAX).unwrap());
    let q = random_table(&env, &layout, 21);
    let cfg = SurrogateConfig {
        neighbor_actions: NeighborActionRule::Greedy,
        ..SurrogateConfig::default()
    };
    let sur = Surrogate::new(&env, &layout, cfg, Some(&q)).unwrap().with_exact(1 << 20).unwrap();
    for e in 0..layout.len() {
        let (s, a, agg) = layout.decompose(e);
        let g = layout.aggregate(agg).unwrap();
        // joint histogram with greedy actions at each neighbor's leave-one-out view
        let mut z = vec![0u32; 4];
        for (x, &c) in g.counts().iter().enumerate() {
            if c == 0 {
                continue;
            }
            let mut view = g.counts().to_vec();
            view[x] -= 1;
            view[s] += 1;
            let vr = layout.state_index().rank_counts(&view);
            let mut best = (0, f64::NEG_INFINITY);
            for u in 0..2 {
                let v = q.get(x, u, vr);
                if v > best.1 {
                    best = (u, v);
                }
            }
            z[x * 2 + best.0] += c;
        }
        let zh = Histogram::joint(2, 2, z).unwrap();
        let bf = brute_force_kernel(&env, s, a, &zh, Mode::Joint, SurrogateConfig::default());
        assert_laws_match(&bf, &library_kernel(&sur, &layout, s, a, agg), 1e-12);
    }
}

#[test]
fn congested_workers_rarely_stay() {
    // success at full congestion is max(0.1, 0.9 - 0.8) = 0.1 per neighbor
    let env = WarehouseEnv::default();
    let layout = TableLayout::new(&env, Mode::Joint, 2, u64::MAX).unwrap();
    let z = Histogram::joint(3, 3, vec![0, 0, 0, 0, 0, 0, 0, 0, 2]).unwrap();
    let agg = layout.aggregate_rank(&z).unwrap();
    let sur = Surrogate::new(&env, &layout, SurrogateConfig::default(), None)
        .unwrap()
        .with_exact(1 << 20)
        .unwrap();
    let d = sur.next_distribution(2, 2, agg).unwrap();
    let both = layout.state_index().rank_counts(&[0, 0, 2]);
    let one = layout.state_index().rank_counts(&[0, 1, 1]);
    let one_idle = layout.state_index().rank_counts(&[1, 0, 1]);
    assert!((d.focal[2] - 0.1).abs() < 1e-12);
    assert!((d.neighbors[both] - 0.01).abs() < 1e-12);
    assert!((d.neighbors[one] + d.neighbors[one_idle] - 2.0 * 0.1 * 0.9).abs() < 1e-12);
}
