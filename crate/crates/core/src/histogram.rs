//! Empirical histograms with a fixed denominator over finite alphabets.
//!
//! A histogram with denominator `kappa` over an alphabet of size `d` is a
//! composition of `kappa` into `d` non-negative parts. There are
//! `C(kappa + d - 1, d - 1)` of them. [`HistogramIndex`] ranks them in
//! colexicographic order of their count vectors (last component most
//! significant), which gives an O(d) ranking formula through the hockey-stick
//! identity and a stable dense layout for Q-tables.

use std::fmt;

use crate::error::{Error, Result};

/// A finite alphabet, optionally declared as the product `states x actions`.
///
/// Product cells are laid out state-major: cell `(s, a)` has index
/// `s * actions + a`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    size: usize,
    product: Option<(usize, usize)>,
    labels: Option<Vec<String>>,
}

impl Alphabet {
    pub fn flat(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("alphabet size must be at least 1"));
        }
        Ok(Self {
            size,
            product: None,
            labels: None,
        })
    }

    pub fn product(states: usize, actions: usize) -> Result<Self> {
        if states == 0 || actions == 0 {
            return Err(Error::invalid("product alphabet factors must be at least 1"));
        }
        let size = states
            .checked_mul(actions)
            .ok_or(Error::Overflow("product alphabet size"))?;
        Ok(Self {
            size,
            product: Some((states, actions)),
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.size {
            return Err(Error::DimensionMismatch {
                what: "alphabet labels",
                expected: self.size,
                found: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn factors(&self) -> Option<(usize, usize)> {
        self.product
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }
}

/// Which axis of a joint state-action histogram to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    State,
    Action,
}

/// Integer counts summing exactly to `kappa`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Histogram {
    counts: Vec<u32>,
    kappa: u32,
    product: Option<(usize, usize)>,
}

impl Histogram {
    /// Flat histogram; `kappa` is the sum of the counts and must be positive.
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("histogram over an empty alphabet"));
        }
        let kappa = counts
            .iter()
            .try_fold(0u32, |acc, &c| acc.checked_add(c))
            .ok_or(Error::Overflow("histogram denominator"))?;
        if kappa == 0 {
            return Err(Error::invalid("histogram denominator must be at least 1"));
        }
        Ok(Self {
            counts,
            kappa,
            product: None,
        })
    }

    /// Joint histogram over `states x actions`, counts laid out state-major.
    pub fn joint(states: usize, actions: usize, counts: Vec<u32>) -> Result<Self> {
        let expected = states * actions;
        if counts.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "joint histogram cells",
                expected,
                found: counts.len(),
            });
        }
        let mut h = Self::new(counts)?;
        h.product = Some((states, actions));
        Ok(h)
    }

    /// Point mass of weight `kappa` at one cell.
    pub fn point_mass(size: usize, cell: usize, kappa: u32) -> Result<Self> {
        if cell >= size {
            return Err(Error::OutOfRange {
                index: cell,
                total: size,
            });
        }
        let mut counts = vec![0; size];
        counts[cell] = kappa;
        Self::new(counts)
    }

    /// Tally of a sequence of cell ids.
    pub fn from_cells(size: usize, cells: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut counts = vec![0u32; size];
        for c in cells {
            if c >= size {
                return Err(Error::OutOfRange {
                    index: c,
                    total: size,
                });
            }
            counts[c] += 1;
        }
        Self::new(counts)
    }

    /// Rounds a pmf onto the grid of histograms with denominator `kappa`
    /// using largest remainders (ties go to the lower cell).
    pub fn round_from_pmf(pmf: &[f64], kappa: u32) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::invalid("histogram denominator must be at least 1"));
        }
        validate_pmf(pmf, 1e-9)?;
        let k = kappa as f64;
        let mut counts: Vec<u32> = pmf.iter().map(|p| (p * k).floor() as u32).collect();
        let assigned: u32 = counts.iter().sum();
        let mut order: Vec<usize> = (0..pmf.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = pmf[a] * k - (pmf[a] * k).floor();
            let rb = pmf[b] * k - (pmf[b] * k).floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let deficit = kappa.saturating_sub(assigned) as usize;
        for &c in order.iter().take(deficit) {
            counts[c] += 1;
        }
        // floor overshoot is impossible for a normalized pmf, but a pmf at the
        // 1e-9 edge can put floor sums one above kappa
        let mut total: u32 = counts.iter().sum();
        for &c in order.iter().rev() {
            if total <= kappa {
                break;
            }
            if counts[c] > 0 {
                counts[c] -= 1;
                total -= 1;
            }
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn kappa(&self) -> u32 {
        self.kappa
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn factors(&self) -> Option<(usize, usize)> {
        self.product
    }

    pub fn mass(&self, cell: usize) -> f64 {
        self.counts[cell] as f64 / self.kappa as f64
    }

    pub fn pmf(&self) -> Vec<f64> {
        let k = self.kappa as f64;
        self.counts.iter().map(|&c| c as f64 / k).collect()
    }

    /// Count-wise sum; the denominators add.
    pub fn merge(&self, other: &Histogram) -> Result<Histogram> {
        if self.counts.len() != other.counts.len() || self.product != other.product {
            return Err(Error::DimensionMismatch {
                what: "histogram alphabet",
                expected: self.counts.len(),
                found: other.counts.len(),
            });
        }
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a + b)
            .collect();
        let mut h = Histogram::new(counts)?;
        h.product = self.product;
        Ok(h)
    }

    pub fn tv(&self, other: &Histogram) -> Result<f64> {
        tv_distance(&self.pmf(), &other.pmf())
    }
}

impl fmt::Display for Histogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.counts.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")/{}", self.kappa)
    }
}

/// Collapses a joint state-action histogram onto one axis.
pub fn marginal(z: &Histogram, axis: Axis) -> Result<Histogram> {
    let (states, actions) = z
        .product
        .ok_or_else(|| Error::invalid("marginal of a histogram not declared as a product"))?;
    let counts = match axis {
        Axis::State => (0..states)
            .map(|s| z.counts[s * actions..(s + 1) * actions].iter().sum())
            .collect(),
        Axis::Action => (0..actions)
            .map(|a| (0..states).map(|s| z.counts[s * actions + a]).sum())
            .collect(),
    };
    Histogram::new(counts)
}

/// Total-variation distance `0.5 * sum |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            what: "tv_distance alphabet",
            expected: p.len(),
            found: q.len(),
        });
    }
    let s: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * s).min(1.0))
}

pub(crate) fn validate_pmf(pmf: &[f64], tol: f64) -> Result<()> {
    if pmf.is_empty() {
        return Err(Error::invalid("empty pmf"));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < -tol) {
        return Err(Error::invalid("pmf has negative or non-finite entries"));
    }
    let s: f64 = pmf.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::invalid(format!("pmf sums to {s}, not 1")));
    }
    Ok(())
}

/// Pascal triangle with checked 64-bit entries; `None` marks overflow.
#[derive(Clone, Debug)]
pub struct Binomial {
    rows: Vec<Vec<Option<u64>>>,
}

impl Binomial {
    pub fn new(max_n: usize) -> Self {
        let mut rows: Vec<Vec<Option<u64>>> = Vec::with_capacity(max_n + 1);
        for n in 0..=max_n {
            let mut row = vec![Some(1u64); n + 1];
            for k in 1..n {
                let prev = &rows[n - 1];
                row[k] = match (prev[k - 1], prev[k]) {
                    (Some(a), Some(b)) => a.checked_add(b),
                    _ => None,
                };
            }
            rows.push(row);
        }
        Self { rows }
    }

    pub fn max_n(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn get(&self, n: usize, k: usize) -> Option<u64> {
        if k > n {
            return Some(0);
        }
        self.rows.get(n).and_then(|row| row[k])
    }
}

/// `C(n, k)` with checked arithmetic, computed multiplicatively.
pub fn binomial(n: u64, k: u64) -> Result<u64> {
    if k > n {
        return Ok(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return Err(Error::Overflow("binomial coefficient"));
        }
    }
    Ok(acc as u64)
}

/// Number of histograms with denominator `kappa` over `alphabet_size` cells.
pub fn histogram_count(alphabet_size: usize, kappa: u32) -> Result<u64> {
    if alphabet_size == 0 {
        return Err(Error::invalid("alphabet size must be at least 1"));
    }
    binomial(
        kappa as u64 + alphabet_size as u64 - 1,
        alphabet_size as u64 - 1,
    )
}

/// Bijection between histograms and `[0, total)` in colexicographic order.
#[derive(Clone, Debug)]
pub struct HistogramIndex {
    alphabet_size: usize,
    kappa: u32,
    total: usize,
    binom: Binomial,
}

impl HistogramIndex {
    /// `kappa = 0` is accepted (a single empty composition) so fibers over
    /// empty states can reuse the same machinery.
    pub fn new(alphabet_size: usize, kappa: u32) -> Result<Self> {
        if alphabet_size == 0 {
            return Err(Error::invalid("alphabet size must be at least 1"));
        }
        let total = histogram_count(alphabet_size, kappa)?;
        let total = usize::try_from(total).map_err(|_| Error::Overflow("histogram count"))?;
        let binom = Binomial::new(kappa as usize + alphabet_size);
        Ok(Self {
            alphabet_size,
            kappa,
            total,
            binom,
        })
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn kappa(&self) -> u32 {
        self.kappa
    }

    pub fn total(&self) -> usize {
        self.total
    }

    #[inline]
    fn c(&self, n: usize, k: usize) -> usize {
        // every coefficient used here is bounded by `total`, which fits
        self.binom.get(n, k).expect("binomial within index range") as usize
    }

    /// Number of compositions of `remaining` into `parts + 1` cells whose
    /// last cell is below `last`.
    #[inline]
    fn below(&self, remaining: usize, parts: usize, last: usize) -> usize {
        self.c(remaining + parts, parts) - self.c(remaining - last + parts, parts)
    }

    /// Rank of a raw count vector. Caller guarantees length and sum.
    pub fn rank_counts(&self, counts: &[u32]) -> usize {
        debug_assert_eq!(counts.len(), self.alphabet_size);
        debug_assert_eq!(counts.iter().sum::<u32>(), self.kappa);
        let mut rank = 0;
        let mut remaining = self.kappa as usize;
        for j in (1..counts.len()).rev() {
            let cj = counts[j] as usize;
            rank += self.below(remaining, j, cj);
            remaining -= cj;
        }
        rank
    }

    pub fn rank(&self, h: &Histogram) -> Result<usize> {
        if h.len() != self.alphabet_size {
            return Err(Error::DimensionMismatch {
                what: "histogram alphabet size",
                expected: self.alphabet_size,
                found: h.len(),
            });
        }
        if h.kappa() != self.kappa {
            return Err(Error::DimensionMismatch {
                what: "histogram denominator",
                expected: self.kappa as usize,
                found: h.kappa() as usize,
            });
        }
        Ok(self.rank_counts(h.counts()))
    }

    /// Writes the count vector of rank `idx` into `out`.
    pub fn unrank_into(&self, mut idx: usize, out: &mut [u32]) -> Result<()> {
        if idx >= self.total {
            return Err(Error::OutOfRange {
                index: idx,
                total: self.total,
            });
        }
        debug_assert_eq!(out.len(), self.alphabet_size);
        let mut remaining = self.kappa as usize;
        for j in (1..self.alphabet_size).rev() {
            // largest c with below(c) <= idx; below is increasing in c
            let mut c = 0;
            while c < remaining && self.below(remaining, j, c + 1) <= idx {
                c += 1;
            }
            idx -= self.below(remaining, j, c);
            out[j] = c as u32;
            remaining -= c;
        }
        out[0] = remaining as u32;
        Ok(())
    }

    pub fn unrank_counts(&self, idx: usize) -> Result<Vec<u32>> {
        let mut out = vec![0; self.alphabet_size];
        self.unrank_into(idx, &mut out)?;
        Ok(out)
    }

    pub fn unrank(&self, idx: usize) -> Result<Histogram> {
        Histogram::new(self.unrank_counts(idx)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec<u32>> + '_ {
        (0..self.total).map(move |i| self.unrank_counts(i).expect("rank in range"))
    }
}

/// All histograms with denominator `kappa` over `alphabet_size` cells, in
/// rank order.
pub fn enumerate_histograms(alphabet_size: usize, kappa: u32) -> Result<Vec<Histogram>> {
    if kappa == 0 {
        return Err(Error::invalid("histogram denominator must be at least 1"));
    }
    let index = HistogramIndex::new(alphabet_size, kappa)?;
    index
        .iter()
        .map(Histogram::new)
        .collect::<Result<Vec<_>>>()
}

/// Number of joint completions of a state histogram with `actions` actions:
/// `prod_s C(g[s] + actions - 1, actions - 1)`.
pub fn fiber_size(g: &Histogram, actions: usize) -> Result<u64> {
    if actions == 0 {
        return Err(Error::invalid("action alphabet must be non-empty"));
    }
    g.counts().iter().try_fold(1u64, |acc, &c| {
        let k = binomial(c as u64 + actions as u64 - 1, actions as u64 - 1)?;
        acc.checked_mul(k).ok_or(Error::Overflow("fiber size"))
    })
}

/// Every joint histogram over `S x A` whose state marginal is exactly `g`.
///
/// Completions are produced in odometer order over the per-state action
/// splits (state 0 varies fastest), each split in its own colex order.
pub fn fiber(g: &Histogram, action_alphabet: &Alphabet) -> Result<Vec<Histogram>> {
    let actions = action_alphabet.size();
    let states = g.len();
    let splits: Vec<Vec<Vec<u32>>> = g
        .counts()
        .iter()
        .map(|&c| HistogramIndex::new(actions, c).map(|ix| ix.iter().collect()))
        .collect::<Result<_>>()?;
    let total = fiber_size(g, actions)?;
    let total = usize::try_from(total).map_err(|_| Error::Overflow("fiber size"))?;
    let mut out = Vec::with_capacity(total);
    let mut digit = vec![0usize; states];
    loop {
        let mut counts = Vec::with_capacity(states * actions);
        for (s, d) in digit.iter().enumerate() {
            counts.extend_from_slice(&splits[s][*d]);
        }
        out.push(Histogram::joint(states, actions, counts)?);
        let mut s = 0;
        loop {
            if s == states {
                return Ok(out);
            }
            digit[s] += 1;
            if digit[s] < splits[s].len() {
                break;
            }
            digit[s] = 0;
            s += 1;
        }
    }
}
