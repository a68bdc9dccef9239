use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::bellman::{
    exact_operator, off_policy_learn, value_iteration_exact, LearningRate, Mode, OffPolicyConfig, QMeta,
    QTable, TableLayout, TrainConfig,
};
use crate::bellman::draw_state;
use crate::env::{empirical_lipschitz, random_pmf, Environment, TabularEnv};
use crate::error::{Error, Result};
use crate::histogram::tv_distance;
use crate::rng::{derive_seed, stream, tag};
use crate::sampler::{exact_aggregate, ht_estimate, tv_concentration_bound};

use super::config::ExperimentConfig;
use super::to_csv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Suite {
    Contraction,
    Concentration,
    Lipschitz,
    HtUnbiasedness,
    Offpolicy,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Contraction,
        Suite::Concentration,
        Suite::Lipschitz,
        Suite::HtUnbiasedness,
        Suite::Offpolicy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Contraction => "contraction",
            Suite::Concentration => "concentration",
            Suite::Lipschitz => "lipschitz",
            Suite::HtUnbiasedness => "ht_unbiasedness",
            Suite::Offpolicy => "offpolicy",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s || (s == "ht" && *x == Suite::HtUnbiasedness))
            .ok_or_else(|| Error::invalid(format!("unknown diagnostic suite '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    /// One-line summary of the measured quantities.
    pub summary: String,
    pub csv: Vec<u8>,
}

/// Runs each suite and returns its report. Suites report failures through
/// `passed`; only setup problems are errors.
pub fn run_diagnostics(cfg: &ExperimentConfig, suites: &[Suite]) -> Result<Vec<SuiteReport>> {
    if suites.is_empty() {
        return Err(Error::invalid("no diagnostic suite selected"));
    }
    cfg.validate()?;
    let hash = cfg.hash();
    suites
        .iter()
        .map(|s| {
            log::info!("diagnostic suite {s}");
            match s {
                Suite::Contraction => contraction(cfg, &hash),
                Suite::Concentration => concentration(cfg, &hash),
                Suite::Lipschitz => lipschitz(cfg, &hash),
                Suite::HtUnbiasedness => ht_unbiasedness(cfg, &hash),
                Suite::Offpolicy => offpolicy(cfg, &hash),
            }
        })
        .collect()
}

fn suite_seed(cfg: &ExperimentConfig, suite: Suite) -> u64 {
    derive_seed(cfg.master_seed, &[tag::DIAGNOSTIC, suite as u64])
}

/// Tabular instance used by the exhaustive suites.
pub fn diagnostic_instance(cfg: &ExperimentConfig) -> Result<TabularEnv> {
    match &cfg.diagnostics.instance {
        Some(p) => TabularEnv::load(p),
        None => Ok(TabularEnv::small()),
    }
}

fn zero_table(env: &dyn Environment, layout: &Arc<TableLayout>) -> QTable {
    QTable::zeros(
        layout.clone(),
        QMeta {
            gamma: env.discount(),
            env_name: env.name().to_string(),
            seed: 0,
            iterations: 0,
            residual: 0.0,
        },
    )
}

fn random_table<R: Rng>(env: &dyn Environment, layout: &Arc<TableLayout>, scale: f64, rng: &mut R) -> QTable {
    let values = (0..layout.len()).map(|_| rng.random_range(-scale..=scale)).collect();
    QTable::from_values(layout.clone(), values, zero_table(env, layout).meta).expect("sized")
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[derive(Serialize)]
struct ContractionRow {
    pair: usize,
    input_gap: f64,
    output_gap: f64,
    ratio: f64,
    pass: bool,
    config_hash: String,
}

fn contraction(cfg: &ExperimentConfig, hash: &str) -> Result<SuiteReport> {
    let env = diagnostic_instance(cfg)?;
    let d = &cfg.diagnostics;
    let gamma = env.discount();
    let layout = Arc::new(TableLayout::new(&env, Mode::Joint, d.contraction_kappa, cfg.train.max_table_entries)?);
    let scale = env.reward_bound() / (1.0 - gamma);
    let mut rng = stream(suite_seed(cfg, Suite::Contraction), &[]);
    let mut rows = Vec::with_capacity(d.contraction_pairs);
    for pair in 0..d.contraction_pairs {
        let q1 = random_table(&env, &layout, scale, &mut rng);
        let q2 = random_table(&env, &layout, scale, &mut rng);
        let t1 = exact_operator(&env, &q1, cfg.surrogate(), cfg.train.exact_cap)?;
        let t2 = exact_operator(&env, &q2, cfg.surrogate(), cfg.train.exact_cap)?;
        let input_gap = sup_diff(q1.values(), q2.values());
        let output_gap = sup_diff(t1.values(), t2.values());
        rows.push(ContractionRow {
            pair,
            input_gap,
            output_gap,
            ratio: output_gap / input_gap,
            pass: output_gap <= gamma * input_gap + 1e-12,
            config_hash: hash.into(),
        });
    }
    let passed = rows.iter().all(|r| r.pass);
    let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.ratio));
    Ok(SuiteReport {
        suite: Suite::Contraction,
        passed,
        summary: format!("max ratio {worst:.6} vs gamma {gamma} over {} pairs", rows.len()),
        csv: to_csv(&rows)?,
    })
}

#[derive(Serialize)]
struct ConcentrationRow {
    kappa: u32,
    delta: f64,
    bound: f64,
    empirical_quantile: f64,
    violation_rate: f64,
    pass: bool,
    config_hash: String,
}

/// i.i.d. draws from a random source pmf over the configured state space;
/// the TV distance of each `kappa`-draw empirical pmf is compared to the
/// bound.
fn concentration(cfg: &ExperimentConfig, hash: &str) -> Result<SuiteReport> {
    let env = cfg.environment()?;
    let ns = env.n_states();
    let d = &cfg.diagnostics;
    let seed = suite_seed(cfg, Suite::Concentration);
    let source = random_pmf(ns, &mut stream(seed, &[0]));
    let delta = d.concentration_delta;
    let trials = d.concentration_trials.max(1);
    let mut rows = Vec::new();
    for &kappa in &d.concentration_kappas {
        let mut rng = stream(seed, &[1, kappa as u64]);
        let bound = tv_concentration_bound(ns, kappa as usize, delta);
        let mut tvs = Vec::with_capacity(trials);
        let mut emp = vec![0.0; ns];
        for _ in 0..trials {
            emp.fill(0.0);
            for _ in 0..kappa {
                emp[draw_state(&source, &mut rng)] += 1.0 / kappa as f64;
            }
            tvs.push(tv_distance(&emp, &source)?);
        }
        let violations = tvs.iter().filter(|&&t| t > bound).count();
        let rate = violations as f64 / trials as f64;
        tvs.sort_by(f64::total_cmp);
        let q = ((1.0 - delta) * trials as f64).ceil() as usize;
        let quantile = tvs[q.clamp(1, trials) - 1];
        let sigma = (delta * (1.0 - delta) / trials as f64).sqrt();
        rows.push(ConcentrationRow {
            kappa,
            delta,
            bound,
            empirical_quantile: quantile,
            violation_rate: rate,
            pass: rate <= delta + 3.0 * sigma,
            config_hash: hash.into(),
        });
    }
    let passed = rows.iter().all(|r| r.pass);
    let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.violation_rate));
    Ok(SuiteReport {
        suite: Suite::Concentration,
        passed,
        summary: format!("max violation rate {worst:.4} at delta {delta}"),
        csv: to_csv(&rows)?,
    })
}

#[derive(Serialize)]
struct LipschitzRow {
    check: String,
    iteration: usize,
    kappa: u32,
    measured: f64,
    bound: f64,
    pairs: usize,
    violations: usize,
    /// Violations among pairs with `TV(g, h) = 0`, where the bound is zero.
    violations_zero_tv: usize,
    pass: bool,
    config_hash: String,
}

/// Exact value-iteration iterates `Q^1..Q^T` in marginal mode.
fn exact_iterates(env: &TabularEnv, cfg: &ExperimentConfig, kappa: u32, t_max: usize) -> Result<Vec<QTable>> {
    let layout = Arc::new(TableLayout::new(env, Mode::Marginal, kappa, cfg.train.max_table_entries)?);
    let mut q = zero_table(env, &layout);
    let mut out = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        q = exact_operator(env, &q, cfg.surrogate(), cfg.train.exact_cap)?;
        out.push(q.clone());
    }
    Ok(out)
}

fn lipschitz(cfg: &ExperimentConfig, hash: &str) -> Result<SuiteReport> {
    let env = diagnostic_instance(cfg)?;
    let d = &cfg.diagnostics;
    let mut rng = stream(suite_seed(cfg, Suite::Lipschitz), &[]);
    let est = empirical_lipschitz(&env, d.lipschitz_pairs, &mut rng);
    let declared = env.lipschitz_p();
    let mut rows = vec![
        LipschitzRow {
            check: "kernel_constant".into(),
            iteration: 0,
            kappa: 0,
            measured: est.kernel,
            bound: declared.unwrap_or(f64::INFINITY),
            pairs: d.lipschitz_pairs,
            violations: usize::from(declared.is_some_and(|l| est.kernel > l + 1e-9)),
            violations_zero_tv: 0,
            pass: declared.is_none_or(|l| est.kernel <= l + 1e-9),
            config_hash: hash.into(),
        },
        LipschitzRow {
            check: "reward_constant".into(),
            iteration: 0,
            kappa: 0,
            measured: est.reward,
            bound: f64::INFINITY,
            pairs: d.lipschitz_pairs,
            violations: 0,
            violations_zero_tv: 0,
            pass: true,
            config_hash: hash.into(),
        },
    ];

    // |Q^t_full(s, a, g) - Q^t_kappa(s, a, h)| <= 4 r_max / (1 - gamma) L_P TV(g, h)
    let gamma = env.discount();
    let lp = est.kernel;
    let coef = 4.0 * env.reward_bound() / (1.0 - gamma) * lp;
    let full = exact_iterates(&env, cfg, d.lipschitz_full_kappa, d.lipschitz_iterations)?;
    for &kappa in &d.lipschitz_kappas {
        let sub = exact_iterates(&env, cfg, kappa, d.lipschitz_iterations)?;
        for (t, (qf, qs)) in full.iter().zip(&sub).enumerate() {
            let lf = qf.layout();
            let ls = qs.layout();
            let mut worst_excess = f64::NEG_INFINITY;
            let mut violations = 0;
            let mut zero_tv = 0;
            let mut pairs = 0;
            for gf in 0..lf.n_marginals() {
                let pf = lf.aggregate(gf)?.pmf();
                for gs in 0..ls.n_marginals() {
                    let ps = ls.aggregate(gs)?.pmf();
                    let tv = tv_distance(&pf, &ps)?;
                    let bound = coef * tv;
                    for s in 0..env.n_states() {
                        for a in 0..env.n_actions() {
                            let gap = (qf.get(s, a, gf) - qs.get(s, a, gs)).abs();
                            pairs += 1;
                            worst_excess = worst_excess.max(gap - bound);
                            if gap > bound + 1e-12 {
                                violations += 1;
                                if tv == 0.0 {
                                    zero_tv += 1;
                                }
                            }
                        }
                    }
                }
            }
            rows.push(LipschitzRow {
                check: "bellman_iterates".into(),
                iteration: t + 1,
                kappa,
                measured: worst_excess,
                bound: 0.0,
                pairs,
                violations,
                violations_zero_tv: zero_tv,
                pass: violations == 0,
                config_hash: hash.into(),
            });
        }
    }
    let passed = rows.iter().all(|r| r.pass);
    let iter_rows: Vec<&LipschitzRow> = rows.iter().filter(|r| r.check == "bellman_iterates").collect();
    let violations: usize = iter_rows.iter().map(|r| r.violations).sum();
    let pairs: usize = iter_rows.iter().map(|r| r.pairs).sum();
    let zero_tv: usize = iter_rows.iter().map(|r| r.violations_zero_tv).sum();
    Ok(SuiteReport {
        suite: Suite::Lipschitz,
        passed,
        summary: format!(
            "kernel L_P measured {:.4} (declared {}), reward constant {:.4}; iterate bound violated in {violations} of {pairs} comparisons ({zero_tv} at zero TV)",
            est.kernel,
            declared.map_or("none".to_string(), |l| l.to_string()),
            est.reward
        ),
        csv: to_csv(&rows)?,
    })
}

#[derive(Serialize)]
struct HtRow {
    state: usize,
    action: usize,
    exact: f64,
    mean: f64,
    stderr: f64,
    z_score: f64,
    pass: bool,
    config_hash: String,
}

fn ht_unbiasedness(cfg: &ExperimentConfig, hash: &str) -> Result<SuiteReport> {
    let env = cfg.environment()?;
    let (ns, na) = (env.n_states(), env.n_actions());
    let d = &cfg.diagnostics;
    let n = d.ht_n;
    let weights = cfg.weights_for(n)?;
    let seed = suite_seed(cfg, Suite::HtUnbiasedness);
    let mut rng = stream(seed, &[0]);
    let states: Vec<usize> = (0..n).map(|_| rng.random_range(0..ns)).collect();
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..na)).collect();
    let agent = 0;
    // proposal: uniform over the other agents
    let proposal: Vec<f64> = (0..n).map(|j| if j == agent { 0.0 } else { 1.0 }).collect();
    let exact = exact_aggregate(&weights, agent, &states, &actions, ns, na)?;
    let reps = d.ht_replications.max(2);
    let mut sum = vec![0.0; ns * na];
    let mut sumsq = vec![0.0; ns * na];
    let mut rng = stream(seed, &[1]);
    for _ in 0..reps {
        let est = ht_estimate(&weights, agent, &proposal, d.ht_kappa, &states, &actions, ns, na, &mut rng)?;
        for (c, v) in est.estimate.iter().enumerate() {
            sum[c] += v;
            sumsq[c] += v * v;
        }
    }
    let k = reps as f64;
    let mut rows = Vec::with_capacity(ns * na);
    for c in 0..ns * na {
        let mean = sum[c] / k;
        let var = ((sumsq[c] - k * mean * mean) / (k - 1.0)).max(0.0);
        let se = (var / k).sqrt();
        let err = (mean - exact[c]).abs();
        let z = if se > 0.0 { err / se } else if err <= 1e-12 { 0.0 } else { f64::INFINITY };
        rows.push(HtRow {
            state: c / na,
            action: c % na,
            exact: exact[c],
            mean,
            stderr: se,
            z_score: z,
            pass: z <= 5.0,
            config_hash: hash.into(),
        });
    }
    let passed = rows.iter().all(|r| r.pass);
    let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.z_score));
    Ok(SuiteReport {
        suite: Suite::HtUnbiasedness,
        passed,
        summary: format!("max |z| {worst:.3} over {} cells, {reps} replications", rows.len()),
        csv: to_csv(&rows)?,
    })
}

#[derive(Serialize)]
struct OffPolicyRow {
    state: usize,
    action: usize,
    aggregate: usize,
    q_offpolicy: f64,
    q_fixed_point: f64,
    abs_error: f64,
    config_hash: String,
}

/// Fixed point of the exact operator, iterated to machine precision.
pub fn exact_fixed_point(env: &dyn Environment, cfg: &ExperimentConfig, mode: Mode, kappa: u32) -> Result<QTable> {
    let mut tc = TrainConfig::new(mode, kappa);
    tc.surrogate = cfg.surrogate();
    tc.tolerance = 1e-13;
    tc.max_iterations = 100_000;
    tc.exact_cap = cfg.train.exact_cap;
    tc.max_table_entries = cfg.train.max_table_entries;
    Ok(value_iteration_exact(env, &tc)?.table)
}

fn offpolicy(cfg: &ExperimentConfig, hash: &str) -> Result<SuiteReport> {
    let env = diagnostic_instance(cfg)?;
    let d = &cfg.diagnostics;
    let fixed = exact_fixed_point(&env, cfg, d.offpolicy_mode, d.offpolicy_kappa)?;
    let mut oc = OffPolicyConfig::new(d.offpolicy_steps);
    oc.rate = LearningRate::Constant(d.offpolicy_alpha);
    oc.trajectory_length = d.offpolicy_trajectory;
    oc.seed = suite_seed(cfg, Suite::Offpolicy);
    oc.surrogate = cfg.surrogate();
    let learned = off_policy_learn(&env, fixed.layout().clone(), &oc)?;
    let layout = fixed.layout();
    let rows: Vec<OffPolicyRow> = (0..layout.len())
        .map(|e| {
            let (s, a, h) = layout.decompose(e);
            let (x, y) = (learned.values()[e], fixed.values()[e]);
            OffPolicyRow {
                state: s,
                action: a,
                aggregate: h,
                q_offpolicy: x,
                q_fixed_point: y,
                abs_error: (x - y).abs(),
                config_hash: hash.into(),
            }
        })
        .collect();
    let err = sup_diff(learned.values(), fixed.values());
    let norm = fixed.sup_norm();
    Ok(SuiteReport {
        suite: Suite::Offpolicy,
        passed: err <= 0.05 * norm,
        summary: format!(
            "sup error {err:.4} vs 5% of ||Q*|| = {:.4} after {} updates",
            0.05 * norm,
            d.offpolicy_steps
        ),
        csv: to_csv(&rows)?,
    })
}
