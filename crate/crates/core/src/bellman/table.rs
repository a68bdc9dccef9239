use std::sync::Arc;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::histogram::{Histogram, HistogramIndex};

use super::Mode;

/// Index arithmetic for a Q-table: entry `(s, a, h)` lives at
/// `(s * |A| + a) * N + rank(h)` where `N` is the number of neighborhood
/// histograms of the layout.
#[derive(Debug)]
pub struct TableLayout {
    mode: Mode,
    n_states: usize,
    n_actions: usize,
    kappa: u32,
    states: HistogramIndex,
    joint: Option<HistogramIndex>,
    /// Count vectors of every state histogram, row-major by rank.
    g_counts: Vec<u32>,
    /// Count vectors of every joint histogram (joint mode only).
    z_counts: Vec<u32>,
    /// State-marginal rank of each joint rank.
    z_to_g: Vec<u32>,
    /// Joint ranks in each fiber, ascending.
    fibers: Vec<Vec<u32>>,
}

impl TableLayout {
    pub fn new(env: &dyn Environment, mode: Mode, kappa: u32, max_entries: u64) -> Result<Self> {
        Self::with_dims(
            env.n_states(),
            env.n_actions(),
            mode,
            kappa,
            max_entries,
            env.marginal_sufficient(),
        )
    }

    pub(crate) fn with_dims(
        n_states: usize,
        n_actions: usize,
        mode: Mode,
        kappa: u32,
        max_entries: u64,
        marginal_ok: bool,
    ) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::invalid("kappa must be at least 1"));
        }
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("empty state or action space"));
        }
        if mode == Mode::Marginal && !marginal_ok {
            return Err(Error::invalid(
                "marginal table requires an environment that only sees the state marginal",
            ));
        }
        let aggregates = match mode {
            Mode::Joint => crate::histogram::histogram_count(n_states * n_actions, kappa)?,
            Mode::Marginal => crate::histogram::histogram_count(n_states, kappa)?,
        };
        let entries = aggregates
            .checked_mul((n_states * n_actions) as u64)
            .ok_or(Error::Overflow("table size"))?;
        if entries > max_entries {
            return Err(Error::Budget {
                what: "Q-table entries",
                required: entries as u128,
                cap: max_entries as u128,
            });
        }

        let states = HistogramIndex::new(n_states, kappa)?;
        let mut g_counts = vec![0u32; states.total() * n_states];
        for (r, row) in g_counts.chunks_mut(n_states).enumerate() {
            states.unrank_into(r, row)?;
        }
        let (joint, z_counts, z_to_g, fibers) = match mode {
            Mode::Marginal => (None, Vec::new(), Vec::new(), Vec::new()),
            Mode::Joint => {
                let d = n_states * n_actions;
                let joint = HistogramIndex::new(d, kappa)?;
                let mut z_counts = vec![0u32; joint.total() * d];
                let mut z_to_g = Vec::with_capacity(joint.total());
                let mut fibers = vec![Vec::new(); states.total()];
                let mut g = vec![0u32; n_states];
                for (r, row) in z_counts.chunks_mut(d).enumerate() {
                    joint.unrank_into(r, row)?;
                    for (s, gs) in g.iter_mut().enumerate() {
                        *gs = row[s * n_actions..(s + 1) * n_actions].iter().sum();
                    }
                    let gr = states.rank_counts(&g);
                    z_to_g.push(gr as u32);
                    fibers[gr].push(r as u32);
                }
                (Some(joint), z_counts, z_to_g, fibers)
            }
        };
        Ok(Self {
            mode,
            n_states,
            n_actions,
            kappa,
            states,
            joint,
            g_counts,
            z_counts,
            z_to_g,
            fibers,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn kappa(&self) -> u32 {
        self.kappa
    }

    /// Number of neighborhood histograms indexing the table.
    pub fn n_aggregates(&self) -> usize {
        match &self.joint {
            Some(j) => j.total(),
            None => self.states.total(),
        }
    }

    pub fn n_marginals(&self) -> usize {
        self.states.total()
    }

    pub fn len(&self) -> usize {
        self.n_states * self.n_actions * self.n_aggregates()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_index(&self) -> &HistogramIndex {
        &self.states
    }

    pub fn joint_index(&self) -> Option<&HistogramIndex> {
        self.joint.as_ref()
    }

    #[inline]
    pub fn index(&self, s: usize, a: usize, agg: usize) -> usize {
        (s * self.n_actions + a) * self.n_aggregates() + agg
    }

    /// Inverse of [`TableLayout::index`].
    #[inline]
    pub fn decompose(&self, entry: usize) -> (usize, usize, usize) {
        let n = self.n_aggregates();
        let sa = entry / n;
        (sa / self.n_actions, sa % self.n_actions, entry % n)
    }

    #[inline]
    pub(crate) fn g_counts(&self, g_rank: usize) -> &[u32] {
        &self.g_counts[g_rank * self.n_states..(g_rank + 1) * self.n_states]
    }

    #[inline]
    pub(crate) fn z_counts(&self, z_rank: usize) -> &[u32] {
        let d = self.n_states * self.n_actions;
        &self.z_counts[z_rank * d..(z_rank + 1) * d]
    }

    /// State-marginal rank of a table aggregate rank.
    #[inline]
    pub fn marginal_rank(&self, agg: usize) -> usize {
        match self.mode {
            Mode::Joint => self.z_to_g[agg] as usize,
            Mode::Marginal => agg,
        }
    }

    /// Aggregate ranks sharing the state marginal `g_rank`, ascending.
    #[inline]
    pub(crate) fn candidates(&self, g_rank: usize) -> Candidates<'_> {
        match self.mode {
            Mode::Joint => Candidates::Fiber(self.fibers[g_rank].iter()),
            Mode::Marginal => Candidates::Single(Some(g_rank)),
        }
    }

    /// Rank of a histogram that indexes this table.
    pub fn aggregate_rank(&self, h: &Histogram) -> Result<usize> {
        match &self.joint {
            Some(j) => j.rank(h),
            None => self.states.rank(h),
        }
    }

    pub fn aggregate(&self, agg: usize) -> Result<Histogram> {
        if agg >= self.n_aggregates() {
            return Err(Error::OutOfRange {
                index: agg,
                total: self.n_aggregates(),
            });
        }
        match self.mode {
            Mode::Joint => Histogram::joint(self.n_states, self.n_actions, self.z_counts(agg).to_vec()),
            Mode::Marginal => Histogram::new(self.g_counts(agg).to_vec()),
        }
    }
}

pub(crate) enum Candidates<'a> {
    Fiber(std::slice::Iter<'a, u32>),
    Single(Option<usize>),
}

impl Iterator for Candidates<'_> {
    type Item = usize;
    #[inline]
    fn next(&mut self) -> Option<usize> {
        match self {
            Candidates::Fiber(it) => it.next().map(|&r| r as usize),
            Candidates::Single(x) => x.take(),
        }
    }
}

/// Metadata persisted with a table.
#[derive(Clone, Debug, PartialEq)]
pub struct QMeta {
    pub gamma: f64,
    pub env_name: String,
    pub seed: u64,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct QTable {
    layout: Arc<TableLayout>,
    values: Vec<f64>,
    pub meta: QMeta,
}

impl QTable {
    pub fn zeros(layout: Arc<TableLayout>, meta: QMeta) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values, meta }
    }

    pub fn from_values(layout: Arc<TableLayout>, values: Vec<f64>, meta: QMeta) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                what: "Q-table values",
                expected: layout.len(),
                found: values.len(),
            });
        }
        Ok(Self { layout, values, meta })
    }

    pub fn layout(&self) -> &Arc<TableLayout> {
        &self.layout
    }

    pub fn mode(&self) -> Mode {
        self.layout.mode
    }

    pub fn kappa(&self) -> u32 {
        self.layout.kappa
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut Vec<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize, agg: usize) -> f64 {
        self.values[self.layout.index(s, a, agg)]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max_{a, h in fiber(g)} Q(s, a, h)`.
    #[inline]
    pub fn backup(&self, s: usize, g_rank: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for a in 0..self.layout.n_actions {
            let base = self.layout.index(s, a, 0);
            for h in self.layout.candidates(g_rank) {
                best = best.max(self.values[base + h]);
            }
        }
        best
    }

    /// Maximizer of [`QTable::backup`]: scans actions ascending, then
    /// aggregate ranks ascending, and keeps the first strict maximum.
    pub fn greedy(&self, s: usize, g_rank: usize) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for a in 0..self.layout.n_actions {
            let base = self.layout.index(s, a, 0);
            for h in self.layout.candidates(g_rank) {
                let v = self.values[base + h];
                if v > best.2 {
                    best = (a, h, v);
                }
            }
        }
        best
    }

    /// Backup values for every `(s, g)`, laid out `s * |G| + rank(g)`.
    pub fn backup_values(&self) -> Vec<f64> {
        let ng = self.layout.n_marginals();
        (0..self.layout.n_states * ng)
            .map(|i| self.backup(i / ng, i % ng))
            .collect()
    }

    /// Greedy action for every `(s, g)`, same layout as
    /// [`QTable::backup_values`].
    pub fn greedy_actions(&self) -> Vec<u16> {
        let ng = self.layout.n_marginals();
        (0..self.layout.n_states * ng)
            .map(|i| self.greedy(i / ng, i % ng).0 as u16)
            .collect()
    }

    /// Errors unless the table was built for an environment with these
    /// dimensions, name and discount.
    pub fn check_compatible(&self, env: &dyn Environment) -> Result<()> {
        if env.n_states() != self.layout.n_states {
            return Err(Error::DimensionMismatch {
                what: "table state count",
                expected: env.n_states(),
                found: self.layout.n_states,
            });
        }
        if env.n_actions() != self.layout.n_actions {
            return Err(Error::DimensionMismatch {
                what: "table action count",
                expected: env.n_actions(),
                found: self.layout.n_actions,
            });
        }
        if env.name() != self.meta.env_name {
            return Err(Error::invalid(format!(
                "table was trained on '{}', not '{}'",
                self.meta.env_name,
                env.name()
            )));
        }
        if (env.discount() - self.meta.gamma).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "table discount {} differs from environment discount {}",
                self.meta.gamma,
                env.discount()
            )));
        }
        if self.mode() == Mode::Marginal && !env.marginal_sufficient() {
            return Err(Error::invalid("marginal table used with a joint-dependent environment"));
        }
        Ok(())
    }
}

/// `max_{a', z' in fiber(g')} Q(s', a', z')` for a state histogram `g'`.
pub fn fiber_backup(q: &QTable, s_next: usize, g_next: &Histogram) -> Result<f64> {
    let layout = q.layout();
    if s_next >= layout.n_states {
        return Err(Error::OutOfRange {
            index: s_next,
            total: layout.n_states,
        });
    }
    let g_rank = layout.states.rank(g_next)?;
    Ok(q.backup(s_next, g_rank))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> QMeta {
        QMeta {
            gamma: 0.9,
            env_name: "t".into(),
            seed: 0,
            iterations: 0,
            residual: 0.0,
        }
    }

    #[test]
    fn layout_sizes() {
        let l = TableLayout::with_dims(3, 3, Mode::Marginal, 24, u64::MAX, true).unwrap();
        assert_eq!(l.n_aggregates(), 325);
        assert_eq!(l.len(), 2925);
        let j = TableLayout::with_dims(2, 2, Mode::Joint, 2, u64::MAX, true).unwrap();
        assert_eq!(j.n_aggregates(), 10);
        assert_eq!(j.n_marginals(), 3);
        let total: usize = (0..3).map(|g| j.candidates(g).count()).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn budget_and_gate() {
        let err = TableLayout::with_dims(3, 3, Mode::Joint, 24, 1000, true).unwrap_err();
        assert!(matches!(err, Error::Budget { .. }));
        assert!(TableLayout::with_dims(2, 2, Mode::Marginal, 2, 100, false).is_err());
    }

    #[test]
    fn index_round_trip() {
        let l = TableLayout::with_dims(2, 3, Mode::Joint, 3, u64::MAX, true).unwrap();
        for e in 0..l.len() {
            let (s, a, h) = l.decompose(e);
            assert_eq!(l.index(s, a, h), e);
        }
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let l = Arc::new(TableLayout::with_dims(2, 2, Mode::Joint, 1, u64::MAX, true).unwrap());
        let mut q = QTable::zeros(l.clone(), meta());
        // state marginal e_0: fiber is {(0,0), (0,1)}
        let g0 = l.state_index().rank_counts(&[1, 0]);
        let fib: Vec<usize> = l.candidates(g0).collect();
        assert_eq!(fib.len(), 2);
        assert_eq!(q.greedy(0, g0), (0, fib[0], 0.0));
        let i = l.index(1, 0, fib[1]);
        q.values_mut()[i] = 3.0;
        let j = l.index(1, 1, fib[0]);
        q.values_mut()[j] = 3.0;
        assert_eq!(q.greedy(1, g0), (0, fib[1], 3.0));
        assert_eq!(q.backup(1, g0), 3.0);
        let g = Histogram::new(vec![1, 0]).unwrap();
        assert_eq!(fiber_backup(&q, 1, &g).unwrap(), 3.0);
    }
}
