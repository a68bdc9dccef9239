use rayon::prelude::*;

use crate::env::Environment;
use crate::error::Result;
use crate::rng::{stream, tag};

use super::surrogate::Surrogate;
use super::table::{QTable, TableLayout};
use super::SurrogateConfig;

/// State pmf of a table aggregate.
pub(crate) fn aggregate_pmf(layout: &TableLayout, agg: usize) -> Vec<f64> {
    let kappa = layout.kappa() as f64;
    layout
        .g_counts(layout.marginal_rank(agg))
        .iter()
        .map(|&c| c as f64 / kappa)
        .collect()
}

/// Deterministic rewards `r(s, a, g_agg)` for every table entry.
pub(crate) fn entry_rewards(env: &dyn Environment, layout: &TableLayout) -> Vec<f64> {
    (0..layout.len())
        .into_par_iter()
        .map(|e| {
            let (s, a, agg) = layout.decompose(e);
            env.reward(s, a, &aggregate_pmf(layout, agg))
        })
        .collect()
}

/// Expected continuation `E[V(s', g')]` under the exact surrogate law, for
/// every entry. `v` holds backup values laid out `s * |G| + rank(g)`.
pub(crate) fn exact_continuations(sur: &Surrogate<'_>, v: &[f64]) -> Result<Vec<f64>> {
    let layout = sur.layout();
    let ng = layout.n_marginals();
    (0..layout.len())
        .into_par_iter()
        .map_init(
            || sur.scratch(),
            |sc, e| {
                let (s, a, agg) = layout.decompose(e);
                sur.fill_distribution(s, a, agg, sc)?;
                let (focal, nbr) = sc.laws();
                let mut total = 0.0;
                for (s_next, &pf) in focal.iter().enumerate() {
                    if pf == 0.0 {
                        continue;
                    }
                    let row = &v[s_next * ng..(s_next + 1) * ng];
                    let inner: f64 = nbr.iter().zip(row).map(|(p, x)| p * x).sum();
                    total += pf * inner;
                }
                Ok(total)
            },
        )
        .collect()
}

/// One application of the exact surrogate Bellman operator.
pub fn exact_operator(env: &dyn Environment, q: &QTable, cfg: SurrogateConfig, cap: u64) -> Result<QTable> {
    let layout = q.layout();
    let sur = Surrogate::new(env, layout, cfg, Some(q))?.with_exact(cap)?;
    let v = q.backup_values();
    let cont = exact_continuations(&sur, &v)?;
    let rewards = entry_rewards(env, layout);
    let gamma = env.discount();
    let values = rewards.iter().zip(&cont).map(|(r, c)| r + gamma * c).collect();
    QTable::from_values(layout.clone(), values, q.meta.clone())
}

/// One application of the empirical operator with `m` surrogate samples per
/// entry, drawn from streams keyed by `(seed, entry rank)`.
pub fn empirical_operator(
    env: &dyn Environment,
    q: &QTable,
    cfg: SurrogateConfig,
    m: usize,
    seed: u64,
) -> Result<QTable> {
    let layout = q.layout();
    let sur = Surrogate::new(env, layout, cfg, Some(q))?;
    let v = q.backup_values();
    let rewards = entry_rewards(env, layout);
    let gamma = env.discount();
    let ng = layout.n_marginals();
    let values = (0..layout.len())
        .into_par_iter()
        .map_init(
            || sur.scratch(),
            |sc, e| {
                let (s, a, agg) = layout.decompose(e);
                let mut rng = stream(seed, &[tag::SURROGATE, 0, e as u64]);
                let mut sum = 0.0;
                for _ in 0..m {
                    let (s_next, g_next) = sur.sample_next(s, a, agg, &mut rng, sc);
                    sum += v[s_next * ng + g_next];
                }
                rewards[e] + gamma * (sum / m as f64)
            },
        )
        .collect();
    QTable::from_values(layout.clone(), values, q.meta.clone())
}
