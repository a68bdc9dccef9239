//! Graphon-weighted neighbor subsampling and neighborhood aggregates.

use rand::Rng;
use rand_distr::{weighted::WeightedAliasIndex, Distribution};

use crate::error::{Error, Result};
use crate::graphon::WeightMatrix;
use crate::histogram::Histogram;

/// The multiset of `kappa` neighbors drawn for one agent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborSample {
    pub agent: usize,
    pub indices: Vec<usize>,
}

impl NeighborSample {
    pub fn kappa(&self) -> usize {
        self.indices.len()
    }
}

/// Per-row alias tables over a [`WeightMatrix`], built once.
#[derive(Debug)]
pub struct NeighborSampler<'w> {
    weights: &'w WeightMatrix,
    tables: Vec<WeightedAliasIndex<f64>>,
}

impl<'w> NeighborSampler<'w> {
    pub fn new(weights: &'w WeightMatrix) -> Result<Self> {
        let tables = (0..weights.n())
            .map(|i| {
                WeightedAliasIndex::new(weights.row(i).to_vec())
                    .map_err(|e| Error::invalid(format!("alias table for row {i}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { weights, tables })
    }

    pub fn weights(&self) -> &WeightMatrix {
        self.weights
    }

    /// `kappa` i.i.d. draws from the normalized row of agent `i`.
    pub fn sample<R: Rng + ?Sized>(&self, i: usize, kappa: usize, rng: &mut R) -> Result<NeighborSample> {
        let n = self.weights.n();
        if i >= n {
            return Err(Error::OutOfRange { index: i, total: n });
        }
        if kappa == 0 {
            return Err(Error::invalid("kappa must be at least 1"));
        }
        let table = &self.tables[i];
        let indices = (0..kappa).map(|_| table.sample(rng)).collect();
        Ok(NeighborSample { agent: i, indices })
    }

    /// Neighbor draws written into `out` without allocating.
    pub(crate) fn sample_into<R: Rng + ?Sized>(&self, i: usize, out: &mut [usize], rng: &mut R) {
        let table = &self.tables[i];
        for o in out.iter_mut() {
            *o = table.sample(rng);
        }
    }
}

/// One-shot form of [`NeighborSampler::sample`]. Builds the row's alias
/// table on every call; use a [`NeighborSampler`] in loops.
pub fn sample_neighbors<R: Rng + ?Sized>(
    weights: &WeightMatrix,
    i: usize,
    kappa: usize,
    rng: &mut R,
) -> Result<NeighborSample> {
    let n = weights.n();
    if i >= n {
        return Err(Error::OutOfRange { index: i, total: n });
    }
    if kappa == 0 {
        return Err(Error::invalid("kappa must be at least 1"));
    }
    let table = WeightedAliasIndex::new(weights.row(i).to_vec())
        .map_err(|e| Error::invalid(format!("alias table for row {i}: {e}")))?;
    Ok(NeighborSample {
        agent: i,
        indices: (0..kappa).map(|_| table.sample(rng)).collect(),
    })
}

fn check_population(n: usize, states: &[usize], actions: Option<&[usize]>) -> Result<()> {
    if states.len() != n {
        return Err(Error::DimensionMismatch {
            what: "population states",
            expected: n,
            found: states.len(),
        });
    }
    if let Some(a) = actions {
        if a.len() != n {
            return Err(Error::DimensionMismatch {
                what: "population actions",
                expected: n,
                found: a.len(),
            });
        }
    }
    Ok(())
}

fn check_sample(sample: &NeighborSample, n: usize) -> Result<()> {
    if sample.indices.is_empty() {
        return Err(Error::invalid("empty neighbor sample"));
    }
    if let Some(&j) = sample.indices.iter().find(|&&j| j >= n || j == sample.agent) {
        return Err(Error::invalid(format!(
            "neighbor {j} invalid for agent {} in a population of {n}",
            sample.agent
        )));
    }
    Ok(())
}

/// Joint state-action histogram of the sampled neighbors.
pub fn empirical_joint(
    sample: &NeighborSample,
    states: &[usize],
    actions: &[usize],
    n_states: usize,
    n_actions: usize,
) -> Result<Histogram> {
    check_population(states.len(), states, Some(actions))?;
    check_sample(sample, states.len())?;
    let mut counts = vec![0u32; n_states * n_actions];
    for &j in &sample.indices {
        let (s, a) = (states[j], actions[j]);
        if s >= n_states || a >= n_actions {
            return Err(Error::invalid(format!("agent {j} has state/action ({s}, {a}) out of range")));
        }
        counts[s * n_actions + a] += 1;
    }
    Histogram::joint(n_states, n_actions, counts)
}

/// State histogram of the sampled neighbors.
pub fn empirical_marginal(sample: &NeighborSample, states: &[usize], n_states: usize) -> Result<Histogram> {
    check_population(states.len(), states, None)?;
    check_sample(sample, states.len())?;
    let mut counts = vec![0u32; n_states];
    for &j in &sample.indices {
        let s = states[j];
        if s >= n_states {
            return Err(Error::invalid(format!("agent {j} has state {s} out of range")));
        }
        counts[s] += 1;
    }
    Histogram::new(counts)
}

/// Graphon-weighted joint pmf `z_i(x, u) = sum_j wbar_ij 1{s_j = x, a_j = u}`.
pub fn exact_aggregate(
    weights: &WeightMatrix,
    i: usize,
    states: &[usize],
    actions: &[usize],
    n_states: usize,
    n_actions: usize,
) -> Result<Vec<f64>> {
    let n = weights.n();
    if i >= n {
        return Err(Error::OutOfRange { index: i, total: n });
    }
    check_population(n, states, Some(actions))?;
    let mut z = vec![0.0; n_states * n_actions];
    for (j, w) in weights.row(i).iter().enumerate() {
        if *w > 0.0 {
            z[states[j] * n_actions + actions[j]] += w;
        }
    }
    Ok(z)
}

/// State marginal of [`exact_aggregate`], computed directly.
pub fn exact_marginal(weights: &WeightMatrix, i: usize, states: &[usize], n_states: usize) -> Result<Vec<f64>> {
    let n = weights.n();
    if i >= n {
        return Err(Error::OutOfRange { index: i, total: n });
    }
    check_population(n, states, None)?;
    let mut g = vec![0.0; n_states];
    exact_marginal_into(weights, i, states, &mut g);
    Ok(g)
}

pub(crate) fn exact_marginal_into(weights: &WeightMatrix, i: usize, states: &[usize], out: &mut [f64]) {
    out.fill(0.0);
    for (j, w) in weights.row(i).iter().enumerate() {
        if *w > 0.0 {
            out[states[j]] += w;
        }
    }
}

/// Identity-aware Horvitz-Thompson estimate of an agent's joint aggregate
/// from neighbors drawn under a proposal `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct HtEstimate {
    pub proposal: Vec<f64>,
    pub sample: NeighborSample,
    /// Importance ratios `wbar_{i,J} / q(J)`, one per draw.
    pub weights: Vec<f64>,
    /// Unprojected estimate over `S x A`; may leave the simplex.
    pub estimate: Vec<f64>,
}

impl HtEstimate {
    /// Euclidean projection of the estimate onto the probability simplex.
    pub fn projected(&self) -> Vec<f64> {
        project_to_simplex(&self.estimate)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn ht_estimate<R: Rng + ?Sized>(
    weights: &WeightMatrix,
    i: usize,
    proposal: &[f64],
    kappa: usize,
    states: &[usize],
    actions: &[usize],
    n_states: usize,
    n_actions: usize,
    rng: &mut R,
) -> Result<HtEstimate> {
    let n = weights.n();
    if i >= n {
        return Err(Error::OutOfRange { index: i, total: n });
    }
    if kappa == 0 {
        return Err(Error::invalid("kappa must be at least 1"));
    }
    check_population(n, states, Some(actions))?;
    if proposal.len() != n {
        return Err(Error::DimensionMismatch {
            what: "proposal length",
            expected: n,
            found: proposal.len(),
        });
    }
    let row = weights.row(i);
    for j in 0..n {
        let q = proposal[j];
        if !(q.is_finite() && q >= 0.0) {
            return Err(Error::invalid("proposal entries must be finite and non-negative"));
        }
        if j == i && q > 0.0 {
            return Err(Error::invalid("proposal puts mass on the agent itself"));
        }
        if row[j] > 0.0 && q <= 0.0 {
            return Err(Error::invalid(format!(
                "proposal vanishes at neighbor {j} where the graphon weight is positive"
            )));
        }
    }
    let table = WeightedAliasIndex::new(proposal.to_vec())
        .map_err(|e| Error::invalid(format!("proposal: {e}")))?;
    let total: f64 = proposal.iter().sum();
    let mut indices = Vec::with_capacity(kappa);
    let mut ratios = Vec::with_capacity(kappa);
    let mut estimate = vec![0.0; n_states * n_actions];
    for _ in 0..kappa {
        let j = table.sample(rng);
        let rho = row[j] / (proposal[j] / total);
        estimate[states[j] * n_actions + actions[j]] += rho / kappa as f64;
        indices.push(j);
        ratios.push(rho);
    }
    Ok(HtEstimate {
        proposal: proposal.iter().map(|q| q / total).collect(),
        sample: NeighborSample { agent: i, indices },
        weights: ratios,
        estimate,
    })
}

/// Euclidean projection onto `{x >= 0, sum x = 1}` (sort-and-threshold).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, x) in u.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// `sqrt((|S| ln 2 + ln(2 / delta)) / (2 kappa))`: with probability at least
/// `1 - delta`, the TV distance between an empirical `kappa`-sample pmf and
/// its source stays below this.
pub fn tv_concentration_bound(n_states: usize, kappa: usize, delta: f64) -> f64 {
    ((n_states as f64 * std::f64::consts::LN_2 + (2.0 / delta).ln()) / (2.0 * kappa as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphon::{build_weights, Graphon, LatentAssignment};
    use crate::histogram::{marginal, Axis};
    use crate::rng::stream;

    fn uniform(n: usize) -> WeightMatrix {
        build_weights(&Graphon::uniform(), &LatentAssignment::sequential(n).unwrap()).unwrap()
    }

    #[test]
    fn two_agents_always_draw_the_other() {
        let w = uniform(2);
        let s = NeighborSampler::new(&w).unwrap();
        let mut rng = stream(0, &[]);
        assert!(s.sample(0, 50, &mut rng).unwrap().indices.iter().all(|&j| j == 1));
        assert!(s.sample(1, 50, &mut rng).unwrap().indices.iter().all(|&j| j == 0));
    }

    #[test]
    fn point_mass_row() {
        let mut raw = vec![0.0; 16];
        raw[3] = 1.0; // agent 0 only sees agent 3
        for i in 1..4 {
            for j in 0..4 {
                raw[i * 4 + j] = 1.0;
            }
        }
        let w = WeightMatrix::from_raw(4, raw).unwrap();
        let mut rng = stream(1, &[]);
        let s = sample_neighbors(&w, 0, 25, &mut rng).unwrap();
        assert!(s.indices.iter().all(|&j| j == 3));
    }

    #[test]
    fn uniform_frequencies_within_five_sigma() {
        let w = uniform(100);
        let sampler = NeighborSampler::new(&w).unwrap();
        let mut rng = stream(2, &[]);
        let draws = 100_000;
        let s = sampler.sample(17, draws, &mut rng).unwrap();
        let mut freq = vec![0usize; 100];
        for j in s.indices {
            freq[j] += 1;
        }
        assert_eq!(freq[17], 0);
        let p = 1.0 / 99.0;
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        for (j, f) in freq.iter().enumerate() {
            if j != 17 {
                assert!((*f as f64 / draws as f64 - p).abs() <= 5.0 * sd, "neighbor {j}");
            }
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let w = uniform(30);
        let sampler = NeighborSampler::new(&w).unwrap();
        let a = sampler.sample(4, 12, &mut stream(9, &[1])).unwrap();
        let b = sampler.sample(4, 12, &mut stream(9, &[1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_tallies() {
        let states = [0, 1, 2, 2];
        let actions = [1, 0, 1, 1];
        let point = NeighborSample { agent: 0, indices: vec![1, 1, 1] };
        let z = empirical_joint(&point, &states, &actions, 3, 2).unwrap();
        assert_eq!(z.counts(), &[0, 0, 3, 0, 0, 0]);

        let two = NeighborSample { agent: 1, indices: vec![0, 3] };
        let z = empirical_joint(&two, &states, &actions, 3, 2).unwrap();
        assert_eq!(z.counts(), &[0, 1, 0, 0, 0, 1]);
        let g = empirical_marginal(&two, &states, 3).unwrap();
        assert_eq!(g, marginal(&z, Axis::State).unwrap());
        assert_eq!(g.kappa(), 2);

        let bad = NeighborSample { agent: 1, indices: vec![1] };
        assert!(empirical_marginal(&bad, &states, 3).is_err());
        assert!(empirical_joint(&two, &states, &actions[..3], 3, 2).is_err());
    }

    #[test]
    fn empirical_marginal_tally_five_of_eight() {
        let states = [0, 2, 2, 2, 2, 2, 1, 1, 0];
        let s = NeighborSample { agent: 0, indices: vec![1, 2, 3, 4, 5, 6, 7, 8] };
        let g = empirical_marginal(&s, &states, 3).unwrap();
        assert_eq!(g.mass(2), 5.0 / 8.0);
        assert_eq!(g.counts().iter().sum::<u32>(), 8);
    }

    #[test]
    fn exact_aggregate_weighted_tally() {
        let raw = vec![0.0, 3.0, 1.0, 3.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let w = WeightMatrix::from_raw(3, raw).unwrap();
        let z = exact_aggregate(&w, 0, &[1, 0, 1], &[0, 1, 0], 2, 2).unwrap();
        let g = marginal_pmf(&z, 2, 2);
        assert!((g[0] - 0.75).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15);
        assert_eq!(exact_marginal(&w, 0, &[1, 0, 1], 2).unwrap(), g);
    }

    fn marginal_pmf(z: &[f64], ns: usize, na: usize) -> Vec<f64> {
        (0..ns).map(|s| z[s * na..(s + 1) * na].iter().sum()).collect()
    }

    #[test]
    fn ht_with_self_proposal_is_the_empirical_joint() {
        let w = build_weights(&Graphon::exp_decay(3.0).unwrap(), &LatentAssignment::sequential(10).unwrap())
            .unwrap();
        let states: Vec<usize> = (0..10).map(|j| j % 3).collect();
        let actions: Vec<usize> = (0..10).map(|j| j % 2).collect();
        let est = ht_estimate(&w, 4, w.row(4), 7, &states, &actions, 3, 2, &mut stream(5, &[])).unwrap();
        for rho in &est.weights {
            assert!((rho - 1.0).abs() < 1e-12);
        }
        let z = empirical_joint(&est.sample, &states, &actions, 3, 2).unwrap();
        for (e, p) in est.estimate.iter().zip(z.pmf()) {
            assert!((e - p).abs() < 1e-12);
        }
    }

    #[test]
    fn ht_two_agents_point_mass() {
        let w = uniform(2);
        let est = ht_estimate(&w, 0, &[0.0, 1.0], 3, &[0, 1], &[0, 1], 2, 2, &mut stream(0, &[])).unwrap();
        assert_eq!(est.estimate, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(est.weights, vec![1.0; 3]);
    }

    #[test]
    fn ht_rejects_bad_support() {
        let w = uniform(4);
        let q = [0.0, 0.5, 0.5, 0.0];
        let err = ht_estimate(&w, 0, &q, 3, &[0; 4], &[0; 4], 1, 1, &mut stream(0, &[]));
        assert!(err.is_err());
        let q = [0.1, 0.3, 0.3, 0.3];
        assert!(ht_estimate(&w, 0, &q, 3, &[0; 4], &[0; 4], 1, 1, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn simplex_projection() {
        assert_eq!(project_to_simplex(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
        let p = project_to_simplex(&[1.5, 0.5, -0.2]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2] == 0.0);
        let p = project_to_simplex(&[0.1, 0.1]);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn concentration_bound_value() {
        let b = tv_concentration_bound(3, 50, 0.05);
        let expect = ((3.0 * 2f64.ln() + 40f64.ln()) / 100.0).sqrt();
        assert!((b - expect).abs() < 1e-15);
    }
}
