use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bellman::{
    AggregateRule, JointNeighborActions, Mode, NeighborActionRule, SampleSchedule, SurrogateConfig,
    TrainConfig,
};
use crate::env::{Environment, RewardNoise, StochasticRewardEnv, TabularEnv, WarehouseEnv, WarehouseParams};
use crate::error::{Error, Result};
use crate::execution::{ExecutionConfig, InitialStates, Observation};
use crate::graphon::{build_weights, Graphon, LatentAssignment, LatentPoint, LatentScheme, WeightMatrix};

/// Full experiment description. Every field has a default, so an empty file
/// is the 25-robot warehouse benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Population size.
    pub n: usize,
    pub kappa_list: Vec<u32>,
    pub mode: Mode,
    pub env: EnvSection,
    pub graphon: GraphonSection,
    pub train: TrainSection,
    pub execute: ExecuteSection,
    pub diagnostics: DiagnosticsSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            n: 25,
            kappa_list: vec![1, 3, 6, 9, 12, 15, 18, 21, 24],
            mode: Mode::Marginal,
            env: EnvSection::default(),
            graphon: GraphonSection::default(),
            train: TrainSection::default(),
            execute: ExecuteSection::default(),
            diagnostics: DiagnosticsSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Warehouse,
    /// Built-in two-state, two-action instance.
    Small,
    /// Tabular instance read from `env.path`.
    Tabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub name: EnvKind,
    pub path: Option<PathBuf>,
    /// Half-width of uniform reward noise; 0 keeps rewards deterministic.
    pub reward_noise: f64,
    pub warehouse: WarehouseParams,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            name: EnvKind::Warehouse,
            path: None,
            reward_noise: 0.0,
            warehouse: WarehouseParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphonChoice {
    #[default]
    Radial,
    ExpDecay,
    Block,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphonSection {
    pub kind: GraphonChoice,
    pub radius: f64,
    pub beta: f64,
    pub boundaries: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub latent: LatentScheme,
    /// Used when `latent = "explicit"`.
    pub coords: Vec<LatentPoint>,
}

impl Default for GraphonSection {
    fn default() -> Self {
        Self {
            kind: GraphonChoice::Radial,
            radius: 0.3,
            beta: 5.0,
            boundaries: Vec::new(),
            values: Vec::new(),
            latent: LatentScheme::Grid,
            coords: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub gamma: f64,
    pub iterations: usize,
    pub samples: usize,
    pub tolerance: f64,
    /// Replicas averaged per entry when rewards are random.
    pub resamples: usize,
    pub surrogate_aggregate: AggregateRule,
    pub neighbor_action_rule: NeighborActionRule,
    pub joint_neighbor_actions: JointNeighborActions,
    pub sample_schedule: SampleSchedule,
    pub max_table_entries: u64,
    pub exact_cap: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            iterations: 250,
            samples: 50,
            tolerance: 1e-4,
            resamples: 1,
            surrogate_aggregate: AggregateRule::LeaveOneOut,
            neighbor_action_rule: NeighborActionRule::Uniform,
            joint_neighbor_actions: JointNeighborActions::Histogram,
            sample_schedule: SampleSchedule::Frozen,
            max_table_entries: 20_000_000,
            exact_cap: 1_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Adds a `kappa = n - 1` run acting on rounded exact aggregates.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecuteSection {
    pub horizon: usize,
    pub seeds: usize,
    pub baseline: Baseline,
    pub initial: InitialStates,
}

impl Default for ExecuteSection {
    fn default() -> Self {
        Self {
            horizon: 100,
            seeds: 30,
            baseline: Baseline::None,
            initial: InitialStates::All(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    /// Tabular instance for the contraction, Lipschitz and off-policy
    /// suites; the built-in small instance when absent.
    pub instance: Option<PathBuf>,
    pub contraction_pairs: usize,
    pub contraction_kappa: u32,
    pub concentration_kappas: Vec<u32>,
    pub concentration_delta: f64,
    pub concentration_trials: usize,
    pub ht_n: usize,
    pub ht_kappa: usize,
    pub ht_replications: usize,
    pub lipschitz_pairs: usize,
    pub lipschitz_full_kappa: u32,
    pub lipschitz_kappas: Vec<u32>,
    pub lipschitz_iterations: usize,
    pub offpolicy_steps: usize,
    pub offpolicy_alpha: f64,
    pub offpolicy_kappa: u32,
    pub offpolicy_mode: Mode,
    pub offpolicy_trajectory: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            instance: None,
            contraction_pairs: 100,
            contraction_kappa: 2,
            concentration_kappas: vec![10, 50, 200],
            concentration_delta: 0.05,
            concentration_trials: 10_000,
            ht_n: 10,
            ht_kappa: 5,
            ht_replications: 100_000,
            lipschitz_pairs: 2_000,
            lipschitz_full_kappa: 6,
            lipschitz_kappas: vec![1, 2, 3],
            lipschitz_iterations: 30,
            offpolicy_steps: 1_000_000,
            offpolicy_alpha: 0.05,
            offpolicy_kappa: 2,
            offpolicy_mode: Mode::Joint,
            offpolicy_trajectory: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub sweep_csv: String,
    pub report_json: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("gmfs-out"),
            sweep_csv: "sweep.csv".into(),
            report_json: "sweep_report.json".into(),
        }
    }
}

fn positive(field: &str, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, msg))
    }
}

/// Parses and validates a TOML experiment description. Unknown keys are
/// errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let field = e
            .span()
            .and_then(|s| text.get(s))
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "config".into());
        Error::config(field, e.message().trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        positive("n", self.n >= 2, "population needs at least 2 agents")?;
        positive("kappa_list", !self.kappa_list.is_empty(), "at least one kappa is required")?;
        for &k in &self.kappa_list {
            if k == 0 || k as usize > self.n - 1 {
                return Err(Error::config(
                    "kappa_list",
                    format!("kappa {k} outside [1, n - 1] = [1, {}]", self.n - 1),
                ));
            }
        }
        let t = &self.train;
        positive("train.gamma", t.gamma > 0.0 && t.gamma < 1.0, "discount must lie in (0, 1)")?;
        positive("train.iterations", t.iterations >= 1, "must be at least 1")?;
        positive("train.samples", t.samples >= 1, "must be at least 1")?;
        positive("train.resamples", t.resamples >= 1, "must be at least 1")?;
        positive(
            "train.tolerance",
            t.tolerance > 0.0 && t.tolerance.is_finite(),
            "must be positive",
        )?;
        positive(
            "env.reward_noise",
            self.env.reward_noise >= 0.0 && self.env.reward_noise.is_finite(),
            "must be finite and non-negative",
        )?;
        if self.env.name == EnvKind::Tabular && self.env.path.is_none() {
            return Err(Error::config("env.path", "tabular environments need a path"));
        }
        if self.env.name == EnvKind::Warehouse {
            self.env.warehouse.validate()?;
        }
        positive("execute.seeds", self.execute.seeds >= 1, "at least one seed is required")?;
        if self.graphon.latent == LatentScheme::Explicit && self.graphon.coords.len() != self.n {
            return Err(Error::config(
                "graphon.coords",
                format!("{} coordinates for {} agents", self.graphon.coords.len(), self.n),
            ));
        }
        self.graphon_model()?;
        let d = &self.diagnostics;
        positive("diagnostics.concentration_delta", d.concentration_delta > 0.0 && d.concentration_delta < 1.0, "must lie in (0, 1)")?;
        positive("diagnostics.ht_n", d.ht_n >= 2, "needs at least 2 agents")?;
        positive("diagnostics.ht_kappa", d.ht_kappa >= 1, "must be at least 1")?;
        positive("diagnostics.offpolicy_alpha", d.offpolicy_alpha > 0.0 && d.offpolicy_alpha <= 1.0, "must lie in (0, 1]")?;
        positive("diagnostics.contraction_kappa", d.contraction_kappa >= 1, "must be at least 1")?;
        positive("diagnostics.offpolicy_kappa", d.offpolicy_kappa >= 1, "must be at least 1")?;
        positive(
            "diagnostics.lipschitz_kappas",
            d.lipschitz_kappas.iter().all(|&k| k >= 1 && k <= d.lipschitz_full_kappa),
            "every kappa must lie in [1, lipschitz_full_kappa]",
        )?;
        positive("diagnostics.concentration_kappas", d.concentration_kappas.iter().all(|&k| k >= 1), "must be positive")?;
        Ok(())
    }

    /// Re-serialized form with every default filled in.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`ExperimentConfig::canonical`], hex encoded. Output
    /// locations are left out so a run can be redirected without changing it.
    pub fn hash(&self) -> String {
        let experiment = ExperimentConfig {
            output: OutputSection::default(),
            ..self.clone()
        };
        let digest = Sha256::digest(experiment.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn graphon_model(&self) -> Result<Graphon> {
        let g = &self.graphon;
        let dim = match g.latent {
            LatentScheme::Grid => 2,
            LatentScheme::Sequential => 1,
            LatentScheme::Explicit => g.coords.first().map_or(1, |p| p.dim()),
        };
        let model = match g.kind {
            GraphonChoice::Radial => Graphon::radial(g.radius, dim),
            GraphonChoice::ExpDecay => Graphon::exp_decay(g.beta),
            GraphonChoice::Block => Graphon::block(g.boundaries.clone(), g.values.clone()),
            GraphonChoice::Uniform => Ok(Graphon::uniform()),
        };
        let model = model.map_err(|e| Error::config("graphon", e.to_string()))?;
        if !matches!(g.kind, GraphonChoice::Uniform) && model.latent_dim() != dim {
            return Err(Error::config(
                "graphon.latent",
                format!("{:?} graphon needs {}-dimensional coordinates", g.kind, model.latent_dim()),
            ));
        }
        Ok(model)
    }

    pub fn latent(&self, n: usize) -> Result<LatentAssignment> {
        match self.graphon.latent {
            LatentScheme::Grid => LatentAssignment::grid(n),
            LatentScheme::Sequential => LatentAssignment::sequential(n),
            LatentScheme::Explicit => LatentAssignment::explicit(self.graphon.coords.clone()),
        }
    }

    /// Interaction weights of the configured population.
    pub fn weights(&self) -> Result<WeightMatrix> {
        build_weights(&self.graphon_model()?, &self.latent(self.n)?)
    }

    /// Weights for a population of a different size (diagnostics). Explicit
    /// coordinates fall back to an evenly spaced assignment.
    pub fn weights_for(&self, n: usize) -> Result<WeightMatrix> {
        let assign = match self.graphon.latent {
            LatentScheme::Explicit if n != self.graphon.coords.len() => LatentAssignment::sequential(n)?,
            _ => self.latent(n)?,
        };
        build_weights(&self.graphon_model()?, &assign)
    }

    pub fn environment(&self) -> Result<Arc<dyn Environment>> {
        let gamma = self.train.gamma;
        Ok(match self.env.name {
            EnvKind::Warehouse => Arc::new(WarehouseEnv::new(self.env.warehouse.clone(), gamma)?),
            EnvKind::Small => Arc::new(TabularEnv::small().with_discount(gamma)?),
            EnvKind::Tabular => {
                let path = self.env.path.as_ref().expect("validated");
                Arc::new(TabularEnv::load(path)?.with_discount(gamma)?)
            }
        })
    }

    /// The environment with reward noise, when noise is configured.
    pub fn stochastic_environment(&self) -> Result<Option<StochasticRewardEnv>> {
        if self.env.reward_noise == 0.0 {
            return Ok(None);
        }
        let noise = RewardNoise::uniform(self.env.reward_noise);
        Ok(Some(StochasticRewardEnv::new(self.environment()?, noise)?))
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            aggregate: self.train.surrogate_aggregate,
            neighbor_actions: self.train.neighbor_action_rule,
            joint_neighbor_actions: self.train.joint_neighbor_actions,
        }
    }

    pub fn train_config(&self, kappa: u32) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: self.mode,
            kappa,
            samples: t.samples,
            max_iterations: t.iterations,
            tolerance: t.tolerance,
            seed: crate::rng::derive_seed(self.master_seed, &[crate::rng::tag::TRAIN, kappa as u64]),
            surrogate: self.surrogate(),
            schedule: t.sample_schedule,
            resamples: t.resamples,
            max_table_entries: t.max_table_entries,
            exact_cap: t.exact_cap,
        }
    }

    pub fn execution_config(&self, observation: Observation) -> ExecutionConfig {
        ExecutionConfig {
            horizon: self.execute.horizon,
            observation,
            initial: self.execute.initial.clone(),
            track_aggregate_error: false,
        }
    }

    pub fn sweep_csv_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.sweep_csv)
    }

    pub fn report_json_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.report_json)
    }
}
