//! Graphon models, latent coordinates and normalized interaction weights.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A latent coordinate on the unit interval or in the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatentPoint {
    Line(f64),
    Plane([f64; 2]),
}

impl LatentPoint {
    pub fn dim(&self) -> u8 {
        match self {
            LatentPoint::Line(_) => 1,
            LatentPoint::Plane(_) => 2,
        }
    }

    fn in_unit_box(&self) -> bool {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        match *self {
            LatentPoint::Line(x) => ok(x),
            LatentPoint::Plane([x, y]) => ok(x) && ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphonKind {
    /// `W(x, y) = 1{|x - y| <= radius}` (Euclidean in the plane).
    Radial { radius: f64 },
    /// `W(x, y) = exp(-beta |x - y|)`.
    ExpDecay { beta: f64 },
    /// Piecewise-constant on a partition of the unit interval. Block `k`
    /// covers `[b_{k-1}, b_k)`, the last block is closed at 1.
    Block {
        boundaries: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    Uniform,
}

/// Symmetric interaction intensity over latent coordinates, valued in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Graphon {
    kind: GraphonKind,
    latent_dim: u8,
}

impl Graphon {
    pub fn radial(radius: f64, latent_dim: u8) -> Result<Self> {
        if !(radius > 0.0 && radius <= 1.0) {
            return Err(Error::invalid(format!("radial radius {radius} outside (0, 1]")));
        }
        if latent_dim != 1 && latent_dim != 2 {
            return Err(Error::invalid("radial graphon latent dimension must be 1 or 2"));
        }
        Ok(Self {
            kind: GraphonKind::Radial { radius },
            latent_dim,
        })
    }

    pub fn exp_decay(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("exp-decay beta {beta} must be positive")));
        }
        Ok(Self {
            kind: GraphonKind::ExpDecay { beta },
            latent_dim: 1,
        })
    }

    pub fn block(boundaries: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0] >= w[1])
            || boundaries.iter().any(|b| !(*b > 0.0 && *b < 1.0))
        {
            return Err(Error::invalid(
                "block boundaries must be strictly increasing inside (0, 1)",
            ));
        }
        let k = boundaries.len() + 1;
        if values.len() != k || values.iter().any(|row| row.len() != k) {
            return Err(Error::DimensionMismatch {
                what: "block value matrix side",
                expected: k,
                found: values.len(),
            });
        }
        for i in 0..k {
            for j in 0..k {
                let v = values[i][j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("block value {v} outside [0, 1]")));
                }
                if v != values[j][i] {
                    return Err(Error::invalid("block value matrix must be symmetric"));
                }
            }
        }
        Ok(Self {
            kind: GraphonKind::Block { boundaries, values },
            latent_dim: 1,
        })
    }

    pub fn uniform() -> Self {
        Self {
            kind: GraphonKind::Uniform,
            latent_dim: 1,
        }
    }

    pub fn kind(&self) -> &GraphonKind {
        &self.kind
    }

    pub fn latent_dim(&self) -> u8 {
        self.latent_dim
    }

    fn check_point(&self, p: &LatentPoint) -> Result<()> {
        // the uniform graphon ignores its arguments and accepts either shape
        if matches!(self.kind, GraphonKind::Uniform) {
            return Ok(());
        }
        if p.dim() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                what: "latent point dimension",
                expected: self.latent_dim as usize,
                found: p.dim() as usize,
            });
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &LatentPoint, y: &LatentPoint) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(self.eval_unchecked(x, y))
    }

    fn eval_unchecked(&self, x: &LatentPoint, y: &LatentPoint) -> f64 {
        match &self.kind {
            GraphonKind::Uniform => 1.0,
            GraphonKind::Radial { radius } => {
                if distance(x, y) <= *radius {
                    1.0
                } else {
                    0.0
                }
            }
            GraphonKind::ExpDecay { beta } => (-beta * distance(x, y)).exp(),
            GraphonKind::Block { boundaries, values } => {
                let (LatentPoint::Line(a), LatentPoint::Line(b)) = (x, y) else {
                    unreachable!("block graphon points are checked to be 1-D")
                };
                values[block_of(boundaries, *a)][block_of(boundaries, *b)]
            }
        }
    }
}

fn distance(x: &LatentPoint, y: &LatentPoint) -> f64 {
    match (x, y) {
        (LatentPoint::Line(a), LatentPoint::Line(b)) => (a - b).abs(),
        (LatentPoint::Plane(a), LatentPoint::Plane(b)) => {
            // hypot is symmetric in its arguments, so W stays exactly symmetric
            (a[0] - b[0]).abs().hypot((a[1] - b[1]).abs())
        }
        _ => unreachable!("points are checked to share the graphon dimension"),
    }
}

fn block_of(boundaries: &[f64], x: f64) -> usize {
    boundaries.partition_point(|b| *b <= x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentScheme {
    /// `alpha_i = i / n` for `i = 1..=n`.
    Sequential,
    /// Row-major lattice on the unit square with corners at 0 and 1.
    Grid,
    Explicit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentAssignment {
    coords: Vec<LatentPoint>,
    scheme: LatentScheme,
}

impl LatentAssignment {
    pub fn sequential(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("latent assignment needs at least one agent"));
        }
        let coords = (1..=n)
            .map(|i| LatentPoint::Line(i as f64 / n as f64))
            .collect();
        Ok(Self {
            coords,
            scheme: LatentScheme::Sequential,
        })
    }

    /// `n` points on a `ceil(sqrt n)`-wide lattice, spacing `1 / (side - 1)`.
    pub fn grid(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("latent assignment needs at least one agent"));
        }
        let mut side = (n as f64).sqrt() as usize;
        while side * side < n {
            side += 1;
        }
        let step = if side > 1 { 1.0 / (side - 1) as f64 } else { 0.0 };
        let coords = (0..n)
            .map(|i| LatentPoint::Plane([(i % side) as f64 * step, (i / side) as f64 * step]))
            .collect();
        Ok(Self {
            coords,
            scheme: LatentScheme::Grid,
        })
    }

    pub fn explicit(coords: Vec<LatentPoint>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("latent assignment needs at least one agent"));
        }
        if let Some(p) = coords.iter().find(|p| !p.in_unit_box()) {
            return Err(Error::invalid(format!("latent point {p:?} outside the unit box")));
        }
        if coords.iter().any(|p| p.dim() != coords[0].dim()) {
            return Err(Error::invalid("latent points mix dimensions"));
        }
        Ok(Self {
            coords,
            scheme: LatentScheme::Explicit,
        })
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[LatentPoint] {
        &self.coords
    }

    pub fn scheme(&self) -> LatentScheme {
        self.scheme
    }
}

/// Dense `n x n` raw graphon weights and their row normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    raw: Vec<f64>,
    normalized: Vec<f64>,
    isolated: Vec<usize>,
}

impl WeightMatrix {
    /// Builds from an explicit raw matrix (row-major). The diagonal is forced
    /// to zero; rows with zero mass fall back to uniform over the others.
    pub fn from_raw(n: usize, mut raw: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("weight matrix needs at least two agents"));
        }
        if raw.len() != n * n {
            return Err(Error::DimensionMismatch {
                what: "raw weight entries",
                expected: n * n,
                found: raw.len(),
            });
        }
        if raw.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("raw weights must be finite and non-negative"));
        }
        for i in 0..n {
            raw[i * n + i] = 0.0;
        }
        let mut normalized = vec![0.0; n * n];
        let mut isolated = Vec::new();
        for i in 0..n {
            let row = &raw[i * n..(i + 1) * n];
            let sum: f64 = row.iter().sum();
            let out = &mut normalized[i * n..(i + 1) * n];
            if sum > 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o = w / sum;
                }
            } else {
                isolated.push(i);
                let u = 1.0 / (n - 1) as f64;
                for (j, o) in out.iter_mut().enumerate() {
                    *o = if j == i { 0.0 } else { u };
                }
            }
        }
        if !isolated.is_empty() {
            warn!(
                "{} isolated agent(s) with zero graphon mass; using uniform neighbor weights",
                isolated.len()
            );
        }
        Ok(Self {
            n,
            raw,
            normalized,
            isolated,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn raw(&self, i: usize, j: usize) -> f64 {
        self.raw[i * self.n + j]
    }

    pub fn normalized(&self, i: usize, j: usize) -> f64 {
        self.normalized[i * self.n + j]
    }

    pub fn raw_row(&self, i: usize) -> &[f64] {
        &self.raw[i * self.n..(i + 1) * self.n]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.normalized[i * self.n..(i + 1) * self.n]
    }

    /// Agents whose raw row was all zeros.
    pub fn isolated(&self) -> &[usize] {
        &self.isolated
    }
}

/// `w_ij = W(alpha_i, alpha_j)` off the diagonal, then row-normalized.
pub fn build_weights(graphon: &Graphon, assign: &LatentAssignment) -> Result<WeightMatrix> {
    let n = assign.n();
    if n < 2 {
        return Err(Error::invalid("weight matrix needs at least two agents"));
    }
    for p in assign.coords() {
        graphon.check_point(p)?;
    }
    let coords = assign.coords();
    let mut raw = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let w = graphon.eval_unchecked(&coords[i], &coords[j]);
            raw[i * n + j] = w;
            raw[j * n + i] = w;
        }
    }
    WeightMatrix::from_raw(n, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radial_inside_radius() {
        let g = Graphon::radial(0.3, 2).unwrap();
        let x = LatentPoint::Plane([0.5, 0.5]);
        let y = LatentPoint::Plane([0.5, 0.7]);
        assert_eq!(g.evaluate(&x, &y).unwrap(), 1.0);
        assert_eq!(g.evaluate(&x, &x).unwrap(), 1.0);
        let far = LatentPoint::Plane([0.9, 0.9]);
        assert_eq!(g.evaluate(&x, &far).unwrap(), 0.0);
    }

    #[test]
    fn exp_decay_value() {
        let g = Graphon::exp_decay(2.0).unwrap();
        let v = g
            .evaluate(&LatentPoint::Line(0.1), &LatentPoint::Line(0.6))
            .unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let g = Graphon::radial(0.3, 2).unwrap();
        let err = g.evaluate(&LatentPoint::Line(0.1), &LatentPoint::Plane([0.0, 0.0]));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let e = Graphon::exp_decay(1.0).unwrap();
        assert!(e
            .evaluate(&LatentPoint::Plane([0.0, 0.0]), &LatentPoint::Line(0.0))
            .is_err());
    }

    #[test]
    fn block_boundaries_are_half_open() {
        let g = Graphon::block(vec![0.5], vec![vec![0.9, 0.1], vec![0.1, 0.6]]).unwrap();
        let at = |a: f64, b: f64| {
            g.evaluate(&LatentPoint::Line(a), &LatentPoint::Line(b))
                .unwrap()
        };
        assert_eq!(at(0.0, 0.49), 0.9);
        assert_eq!(at(0.5, 0.5), 0.6);
        assert_eq!(at(0.49, 0.5), 0.1);
        assert_eq!(at(1.0, 1.0), 0.6);
        assert!(Graphon::block(vec![0.5], vec![vec![0.9, 0.2], vec![0.1, 0.6]]).is_err());
        assert!(Graphon::block(vec![0.6, 0.4], vec![vec![0.0; 3]; 3]).is_err());
    }

    #[test]
    fn uniform_weights_are_one_over_n_minus_one() {
        let w = build_weights(&Graphon::uniform(), &LatentAssignment::sequential(4).unwrap())
            .unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert_eq!(w.normalized(i, j), expect);
            }
        }
    }

    #[test]
    fn corner_has_fewer_radial_neighbors_than_center() {
        let assign = LatentAssignment::grid(25).unwrap();
        assert_eq!(assign.coords()[1], LatentPoint::Plane([0.25, 0.0]));
        let w = build_weights(&Graphon::radial(0.3, 2).unwrap(), &assign).unwrap();
        let nonzero = |i: usize| w.raw_row(i).iter().filter(|v| **v > 0.0).count();
        // grid spacing 0.25: only axis neighbors are within 0.3
        assert_eq!(nonzero(0), 2);
        assert_eq!(nonzero(12), 4);
        assert!(nonzero(0) < nonzero(12));
    }

    #[test]
    fn zero_graphon_falls_back_to_uniform() {
        let w = WeightMatrix::from_raw(3, vec![0.0; 9]).unwrap();
        assert_eq!(w.isolated(), &[0, 1, 2]);
        assert_eq!(w.row(0), &[0.0, 0.5, 0.5]);
        assert_eq!(w.row(1), &[0.5, 0.0, 0.5]);
        assert_eq!(w.row(2), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn too_few_agents() {
        let a = LatentAssignment::sequential(1).unwrap();
        assert!(build_weights(&Graphon::uniform(), &a).is_err());
    }

    #[test]
    fn rows_sum_to_one_and_raw_is_symmetric() {
        let a = LatentAssignment::sequential(37).unwrap();
        for g in [
            Graphon::exp_decay(3.0).unwrap(),
            Graphon::radial(0.1, 1).unwrap(),
            Graphon::block(vec![0.3, 0.7], vec![
                vec![1.0, 0.2, 0.0],
                vec![0.2, 0.5, 0.0],
                vec![0.0, 0.0, 0.0],
            ])
            .unwrap(),
        ] {
            let w = build_weights(&g, &a).unwrap();
            for i in 0..37 {
                assert_eq!(w.raw(i, i), 0.0);
                assert_eq!(w.normalized(i, i), 0.0);
                let s: f64 = w.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for j in 0..37 {
                    assert_eq!(w.raw(i, j), w.raw(j, i));
                    assert!(w.normalized(i, j) >= 0.0);
                }
            }
            assert_eq!(build_weights(&g, &a).unwrap(), w);
        }
    }
}
