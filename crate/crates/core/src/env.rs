//! Environments: a transition kernel and a local reward, both conditioned on
//! the neighborhood state marginal `g`, plus metadata.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histogram::{tv_distance, validate_pmf};

/// Local dynamics shared by every agent.
///
/// `g` is always a pmf over the state alphabet. Implementations may assume
/// valid ids and a normalized `g`; the checked entry points are
/// [`step_distribution`] and [`local_reward`].
pub trait Environment: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Writes `P(. | s, a, g)` into `out` (length `n_states`).
    fn transition(&self, s: usize, a: usize, g: &[f64], out: &mut [f64]);
    fn reward(&self, s: usize, a: usize, g: &[f64]) -> f64;
    /// `sup |r|` over all inputs.
    fn reward_bound(&self) -> f64;
    /// Kernel Lipschitz constant in TV, when known.
    fn lipschitz_p(&self) -> Option<f64>;
    fn discount(&self) -> f64;
    /// Whether kernel and reward see neighbors only through their state
    /// marginal. Gates the marginal Q-table layout.
    fn marginal_sufficient(&self) -> bool {
        true
    }
}

fn check_ids(env: &dyn Environment, s: usize, a: usize) -> Result<()> {
    if s >= env.n_states() {
        return Err(Error::OutOfRange {
            index: s,
            total: env.n_states(),
        });
    }
    if a >= env.n_actions() {
        return Err(Error::OutOfRange {
            index: a,
            total: env.n_actions(),
        });
    }
    Ok(())
}

fn check_marginal(env: &dyn Environment, g: &[f64]) -> Result<()> {
    if g.len() != env.n_states() {
        return Err(Error::DimensionMismatch {
            what: "state marginal length",
            expected: env.n_states(),
            found: g.len(),
        });
    }
    validate_pmf(g, 1e-9)
}

pub fn step_distribution(env: &dyn Environment, s: usize, a: usize, g: &[f64]) -> Result<Vec<f64>> {
    check_ids(env, s, a)?;
    check_marginal(env, g)?;
    let mut out = vec![0.0; env.n_states()];
    env.transition(s, a, g, &mut out);
    Ok(out)
}

pub fn local_reward(env: &dyn Environment, s: usize, a: usize, g: &[f64]) -> Result<f64> {
    check_ids(env, s, a)?;
    check_marginal(env, g)?;
    Ok(env.reward(s, a, g))
}

/// Mean of the local rewards `r(s_i, a_i, g_i)`.
pub fn team_reward(
    env: &dyn Environment,
    states: &[usize],
    actions: &[usize],
    aggregates: &[Vec<f64>],
) -> Result<f64> {
    let n = states.len();
    if actions.len() != n || aggregates.len() != n {
        return Err(Error::DimensionMismatch {
            what: "team reward inputs",
            expected: n,
            found: if actions.len() != n {
                actions.len()
            } else {
                aggregates.len()
            },
        });
    }
    if n == 0 {
        return Err(Error::invalid("team reward of an empty population"));
    }
    let mut total = 0.0;
    for i in 0..n {
        total += local_reward(env, states[i], actions[i], &aggregates[i])?;
    }
    Ok(total / n as f64)
}

/// Draws a random pmf of length `k` (normalized exponentials, i.e. flat
/// Dirichlet).
pub fn random_pmf<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Largest observed ratios `TV(P(g), P(g')) / TV(g, g')` and
/// `|r(g) - r(g')| / TV(g, g')` over random marginal pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzEstimate {
    pub kernel: f64,
    pub reward: f64,
}

pub fn empirical_lipschitz<R: Rng + ?Sized>(
    env: &dyn Environment,
    pairs: usize,
    rng: &mut R,
) -> LipschitzEstimate {
    let ns = env.n_states();
    let mut p = vec![0.0; ns];
    let mut q = vec![0.0; ns];
    let mut est = LipschitzEstimate {
        kernel: 0.0,
        reward: 0.0,
    };
    for _ in 0..pairs {
        let g = random_pmf(ns, rng);
        let h = random_pmf(ns, rng);
        let d = tv_distance(&g, &h).expect("same length");
        if d < 1e-12 {
            continue;
        }
        for s in 0..ns {
            for a in 0..env.n_actions() {
                env.transition(s, a, &g, &mut p);
                env.transition(s, a, &h, &mut q);
                let kp = tv_distance(&p, &q).expect("same length") / d;
                let kr = (env.reward(s, a, &g) - env.reward(s, a, &h)).abs() / d;
                est.kernel = est.kernel.max(kp);
                est.reward = est.reward.max(kr);
            }
        }
    }
    est
}

/// Parameters of the warehouse robot benchmark. States and actions are
/// idle (0), transit (1), working (2); an action names the intended next
/// state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarehouseParams {
    pub state_values: [f64; 3],
    pub action_costs: [f64; 3],
    pub congestion_sensitivity: f64,
    pub min_utility: f64,
    pub base_success: f64,
    pub min_work_success: f64,
    pub congestion_slope: f64,
}

impl Default for WarehouseParams {
    fn default() -> Self {
        Self {
            state_values: [10.0, 5.0, 20.0],
            action_costs: [0.0, 0.0, 5.0],
            congestion_sensitivity: 5.0,
            min_utility: 0.4,
            base_success: 0.9,
            min_work_success: 0.1,
            congestion_slope: 0.8,
        }
    }
}

impl WarehouseParams {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!("env.{name}"), format!("{p} is not a probability")))
            }
        };
        prob("base_success", self.base_success)?;
        prob("min_work_success", self.min_work_success)?;
        if self.congestion_slope < 0.0 || self.congestion_sensitivity < 0.0 {
            return Err(Error::config(
                "env.congestion_slope",
                "congestion parameters must be non-negative",
            ));
        }
        let all = self
            .state_values
            .iter()
            .chain(&self.action_costs)
            .chain([&self.min_utility]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::config("env", "non-finite warehouse parameter"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarehouseEnv {
    params: WarehouseParams,
    discount: f64,
}

impl WarehouseEnv {
    pub const IDLE: usize = 0;
    pub const TRANSIT: usize = 1;
    pub const WORKING: usize = 2;

    pub fn new(params: WarehouseParams, discount: f64) -> Result<Self> {
        params.validate()?;
        check_discount(discount)?;
        Ok(Self { params, discount })
    }

    pub fn params(&self) -> &WarehouseParams {
        &self.params
    }

    fn utility(&self, g: &[f64]) -> f64 {
        let p = &self.params;
        p.min_utility
            .max(1.0 - p.congestion_sensitivity * g[Self::WORKING])
    }
}

impl Default for WarehouseEnv {
    fn default() -> Self {
        Self {
            params: WarehouseParams::default(),
            discount: 0.95,
        }
    }
}

fn check_discount(discount: f64) -> Result<()> {
    if discount > 0.0 && discount < 1.0 {
        Ok(())
    } else {
        Err(Error::config("train.gamma", format!("discount {discount} outside (0, 1)")))
    }
}

impl Environment for WarehouseEnv {
    fn name(&self) -> &str {
        "warehouse"
    }

    fn n_states(&self) -> usize {
        3
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn transition(&self, s: usize, a: usize, g: &[f64], out: &mut [f64]) {
        let p = &self.params;
        out.fill(0.0);
        if a == Self::WORKING {
            let ok = p
                .min_work_success
                .max(p.base_success - p.congestion_slope * g[Self::WORKING]);
            out[Self::WORKING] += ok;
            out[Self::TRANSIT] += 1.0 - ok;
        } else {
            // both branches are written even when a == s
            out[a] += p.base_success;
            out[s] += 1.0 - p.base_success;
        }
    }

    fn reward(&self, s: usize, a: usize, g: &[f64]) -> f64 {
        self.params.state_values[s] * self.utility(g) - self.params.action_costs[a]
    }

    fn reward_bound(&self) -> f64 {
        let p = &self.params;
        let mut bound: f64 = 0.0;
        for v in p.state_values {
            for c in p.action_costs {
                // affine in the utility multiplier, extremes at its endpoints
                let lo = p.min_utility.min(1.0);
                bound = bound.max((v - c).abs()).max((v * lo - c).abs());
            }
        }
        bound
    }

    fn lipschitz_p(&self) -> Option<f64> {
        Some(self.params.congestion_slope)
    }

    fn discount(&self) -> f64 {
        self.discount
    }
}

/// Tabular environment whose kernel is a mixture over neighbor states and
/// whose reward is affine in the marginal:
///
/// `P(. | s, a, g) = sum_x g(x) K[s][a][x][.]`,
/// `r(s, a, g) = c0[s][a] + sum_x c1[s][a][x] g(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularEnv {
    name: String,
    n_states: usize,
    n_actions: usize,
    discount: f64,
    kernel: Vec<f64>,
    reward_base: Vec<f64>,
    reward_slope: Vec<f64>,
}

/// Two-state two-action congestion toy used for exhaustive checks.
pub const SMALL_INSTANCE: &str = "\
# two-state congestion toy: state 1 pays, crowding in state 1 hurts
# action 0 = stay, action 1 = switch
name small
states 2
actions 2
discount 0.9
# kernel s a x : P(s'=0) P(s'=1)
kernel 0 0 0 : 0.9 0.1
kernel 0 0 1 : 0.6 0.4
kernel 0 1 0 : 0.1 0.9
kernel 0 1 1 : 0.4 0.6
kernel 1 0 0 : 0.1 0.9
kernel 1 0 1 : 0.4 0.6
kernel 1 1 0 : 0.9 0.1
kernel 1 1 1 : 0.6 0.4
# reward s a : c0 c1[x=0] c1[x=1]
reward 0 0 : 0.0 0.0 0.0
reward 0 1 : -0.5 0.0 0.0
reward 1 0 : 2.0 0.0 -1.5
reward 1 1 : 1.5 0.0 -1.5
";

impl TabularEnv {
    pub fn small() -> Self {
        Self::parse(SMALL_INSTANCE).expect("built-in instance parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        check_discount(discount)?;
        self.discount = discount;
        Ok(self)
    }

    /// Parses the line-oriented text format (see [`SMALL_INSTANCE`]).
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::invalid(format!("tabular env line {line}: {msg}"));
        let mut name = String::from("tabular");
        let mut ns = None;
        let mut na = None;
        let mut discount = None;
        let mut kernel_lines = Vec::new();
        let mut reward_lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (head, tail) = match line.split_once(':') {
                Some((h, t)) => (h, Some(t)),
                None => (line, None),
            };
            let mut words = head.split_whitespace();
            let key = words.next().unwrap_or_default();
            let ints: Vec<&str> = words.collect();
            let parse_usize = |w: &str| w.parse::<usize>().map_err(|_| bad(lineno, "expected an integer"));
            let parse_floats = |t: Option<&str>| -> Result<Vec<f64>> {
                t.ok_or_else(|| bad(lineno, "missing ':' before coefficients"))?
                    .split_whitespace()
                    .map(|w| w.parse::<f64>().map_err(|_| bad(lineno, "expected a number")))
                    .collect()
            };
            match key {
                "name" => name = ints.join(" "),
                "states" => ns = Some(parse_usize(ints.first().copied().unwrap_or(""))?),
                "actions" => na = Some(parse_usize(ints.first().copied().unwrap_or(""))?),
                "discount" => {
                    discount = Some(
                        ints.first()
                            .and_then(|w| w.parse::<f64>().ok())
                            .ok_or_else(|| bad(lineno, "expected a number"))?,
                    )
                }
                "kernel" if ints.len() == 3 => {
                    let idx = (parse_usize(ints[0])?, parse_usize(ints[1])?, parse_usize(ints[2])?);
                    kernel_lines.push((lineno, idx, parse_floats(tail)?));
                }
                "reward" if ints.len() == 2 => {
                    let idx = (parse_usize(ints[0])?, parse_usize(ints[1])?);
                    reward_lines.push((lineno, idx, parse_floats(tail)?));
                }
                _ => return Err(bad(lineno, &format!("unrecognized directive `{key}`"))),
            }
        }
        let ns = ns.ok_or_else(|| Error::invalid("tabular env: missing `states`"))?;
        let na = na.ok_or_else(|| Error::invalid("tabular env: missing `actions`"))?;
        if ns == 0 || na == 0 {
            return Err(Error::invalid("tabular env: empty state or action space"));
        }
        let discount = discount.unwrap_or(0.95);
        check_discount(discount)?;

        let mut kernel = vec![f64::NAN; ns * na * ns * ns];
        for (lineno, (s, a, x), p) in kernel_lines {
            if s >= ns || a >= na || x >= ns {
                return Err(bad(lineno, "index out of range"));
            }
            if p.len() != ns {
                return Err(bad(lineno, "kernel row length differs from `states`"));
            }
            validate_pmf(&p, 1e-9).map_err(|e| bad(lineno, &e.to_string()))?;
            let off = ((s * na + a) * ns + x) * ns;
            kernel[off..off + ns].copy_from_slice(&p);
        }
        if kernel.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("tabular env: missing kernel rows"));
        }
        let mut reward_base = vec![f64::NAN; ns * na];
        let mut reward_slope = vec![0.0; ns * na * ns];
        for (lineno, (s, a), c) in reward_lines {
            if s >= ns || a >= na {
                return Err(bad(lineno, "index out of range"));
            }
            if c.len() != ns + 1 {
                return Err(bad(lineno, "reward needs 1 + states coefficients"));
            }
            reward_base[s * na + a] = c[0];
            reward_slope[(s * na + a) * ns..(s * na + a + 1) * ns].copy_from_slice(&c[1..]);
        }
        if reward_base.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("tabular env: missing reward rows"));
        }
        Ok(Self {
            name,
            n_states: ns,
            n_actions: na,
            discount,
            kernel,
            reward_base,
            reward_slope,
        })
    }

    fn kernel_row(&self, s: usize, a: usize, x: usize) -> &[f64] {
        let ns = self.n_states;
        let off = ((s * self.n_actions + a) * ns + x) * ns;
        &self.kernel[off..off + ns]
    }
}

impl Environment for TabularEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn transition(&self, s: usize, a: usize, g: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (x, gx) in g.iter().enumerate() {
            if *gx == 0.0 {
                continue;
            }
            for (o, k) in out.iter_mut().zip(self.kernel_row(s, a, x)) {
                *o += gx * k;
            }
        }
    }

    fn reward(&self, s: usize, a: usize, g: &[f64]) -> f64 {
        let i = s * self.n_actions + a;
        let slope = &self.reward_slope[i * self.n_states..(i + 1) * self.n_states];
        self.reward_base[i] + slope.iter().zip(g).map(|(c, p)| c * p).sum::<f64>()
    }

    fn reward_bound(&self) -> f64 {
        let ns = self.n_states;
        let mut bound: f64 = 0.0;
        for i in 0..ns * self.n_actions {
            for x in 0..ns {
                bound = bound.max((self.reward_base[i] + self.reward_slope[i * ns + x]).abs());
            }
        }
        bound
    }

    fn lipschitz_p(&self) -> Option<f64> {
        let mut l: f64 = 0.0;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for x in 0..self.n_states {
                    for y in 0..x {
                        let d = tv_distance(self.kernel_row(s, a, x), self.kernel_row(s, a, y))
                            .expect("same length");
                        l = l.max(d);
                    }
                }
            }
        }
        Some(l)
    }

    fn discount(&self) -> f64 {
        self.discount
    }
}

/// Additive noise on top of a deterministic reward.
#[derive(Clone, Debug, PartialEq)]
pub enum RewardNoise {
    Degenerate,
    /// Uniform on `[r - h, r + h]`; `overrides` sets `h` per `(s, a)`.
    Uniform {
        half_width: f64,
        overrides: Vec<((usize, usize), f64)>,
    },
}

impl RewardNoise {
    pub fn uniform(half_width: f64) -> Self {
        RewardNoise::Uniform {
            half_width,
            overrides: Vec::new(),
        }
    }

    fn half_width(&self, s: usize, a: usize) -> f64 {
        match self {
            RewardNoise::Degenerate => 0.0,
            RewardNoise::Uniform {
                half_width,
                overrides,
            } => overrides
                .iter()
                .find(|(k, _)| *k == (s, a))
                .map_or(*half_width, |(_, h)| *h),
        }
    }

    fn max_half_width(&self) -> f64 {
        match self {
            RewardNoise::Degenerate => 0.0,
            RewardNoise::Uniform {
                half_width,
                overrides,
            } => overrides.iter().fold(*half_width, |m, (_, h)| m.max(*h)),
        }
    }
}

/// An environment whose local reward is a bounded random variable with mean
/// equal to the base reward.
#[derive(Clone, Debug)]
pub struct StochasticRewardEnv {
    base: Arc<dyn Environment>,
    noise: RewardNoise,
}

impl StochasticRewardEnv {
    pub fn new(base: Arc<dyn Environment>, noise: RewardNoise) -> Result<Self> {
        let ok = match &noise {
            RewardNoise::Degenerate => true,
            RewardNoise::Uniform {
                half_width,
                overrides,
            } => {
                half_width.is_finite()
                    && *half_width >= 0.0
                    && overrides.iter().all(|((s, a), h)| {
                        *s < base.n_states() && *a < base.n_actions() && h.is_finite() && *h >= 0.0
                    })
            }
        };
        if !ok {
            return Err(Error::invalid("reward noise half-widths must be finite and >= 0"));
        }
        Ok(Self { base, noise })
    }

    pub fn base(&self) -> &Arc<dyn Environment> {
        &self.base
    }

    pub fn noise(&self) -> &RewardNoise {
        &self.noise
    }

    /// Declared support `[low, high]` of every reward draw.
    pub fn support(&self) -> (f64, f64) {
        let b = self.base.reward_bound();
        let h = self.noise.max_half_width();
        (-b - h, b + h)
    }

    /// A single reward draw. The degenerate family consumes no randomness.
    pub fn sample_reward<R: Rng + ?Sized>(&self, s: usize, a: usize, g: &[f64], rng: &mut R) -> f64 {
        let r = self.base.reward(s, a, g);
        let h = self.noise.half_width(s, a);
        if h == 0.0 {
            return r;
        }
        let u: f64 = rng.random_range(-1.0..=1.0);
        r + h * u
    }
}

impl Environment for StochasticRewardEnv {
    fn name(&self) -> &str {
        self.base.name()
    }

    fn n_states(&self) -> usize {
        self.base.n_states()
    }

    fn n_actions(&self) -> usize {
        self.base.n_actions()
    }

    fn transition(&self, s: usize, a: usize, g: &[f64], out: &mut [f64]) {
        self.base.transition(s, a, g, out)
    }

    /// Mean reward.
    fn reward(&self, s: usize, a: usize, g: &[f64]) -> f64 {
        self.base.reward(s, a, g)
    }

    fn reward_bound(&self) -> f64 {
        let (lo, hi) = self.support();
        lo.abs().max(hi.abs())
    }

    fn lipschitz_p(&self) -> Option<f64> {
        self.base.lipschitz_p()
    }

    fn discount(&self) -> f64 {
        self.base.discount()
    }

    fn marginal_sufficient(&self) -> bool {
        self.base.marginal_sufficient()
    }
}
