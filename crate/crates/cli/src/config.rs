//! Experiment configuration: a strict TOML file, command-line overrides and
//! built-in defaults, resolved in that order of precedence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use latent_core::datagen::{Scenario, ScenarioSpec, SplitKind};
use latent_core::losses::Strategy;
use latent_core::trainer::{LambdaChoice, ProtocolConfig, TrainConfig, LAMBDA_GRID};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Sample count used unless `--full-size` or the config says otherwise.
pub const DESK_N: usize = 20_000;
pub const FULL_N: usize = 100_000;
pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_BATCH: usize = 128;
pub const DEFAULT_SEED: u64 = 1;
/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LATENT_OUT_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: Option<PathBuf>,
    /// Existing dataset table; generated from `[data]` when absent.
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Aggregate-target overrides by variable name.
    #[serde(default)]
    pub targets: BTreeMap<String, f64>,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
    #[serde(default)]
    pub consistency: ConsistencySection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub scenario: Option<Scenario>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub prob_cap: Option<f64>,
    pub gain: Option<f64>,
    pub floor: Option<f64>,
    /// Regime where every head reaches probability 1 for some samples: `prob_cap = 1`, `gain = 4`.
    #[serde(default)]
    pub saturating: bool,
    pub weights: Option<Vec<Vec<f64>>>,
    pub intercepts: Option<Vec<f64>>,
    pub spreads: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub strategy: Option<Strategy>,
    /// Fixed λ; the grid is searched when absent.
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub hidden: Option<Vec<usize>>,
    pub known_partition: Option<bool>,
    pub target_split: Option<SplitKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub scenarios: Option<Vec<Scenario>>,
    pub strategies: Option<Vec<Strategy>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencySection {
    pub seeds: Option<[u64; 2]>,
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub strategy: Option<Strategy>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub full_size: bool,
    pub out: Option<PathBuf>,
    pub scenario: Option<Scenario>,
    pub dataset: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Folds overrides into the file values.
    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.data.seed = Some(seed);
            self.train.seed = Some(seed);
        }
        if o.lambda.is_some() {
            self.train.lambda = o.lambda;
        }
        if o.alpha.is_some() {
            self.train.alpha = o.alpha;
        }
        if o.strategy.is_some() {
            self.train.strategy = o.strategy;
        }
        if o.epochs.is_some() {
            self.train.epochs = o.epochs;
        }
        if o.batch_size.is_some() {
            self.train.batch_size = o.batch_size;
        }
        if o.full_size {
            self.data.n = Some(FULL_N);
        }
        if o.out.is_some() {
            self.out_dir = o.out.clone();
        }
        if o.scenario.is_some() {
            self.data.scenario = o.scenario;
        }
        if o.dataset.is_some() {
            self.dataset = o.dataset.clone();
        }
        self
    }

    /// Replaces every unset field by its default so the manifest is self-describing.
    pub fn materialize(mut self, command: &str) -> Self {
        let d = &mut self.data;
        d.n.get_or_insert(DESK_N);
        d.seed.get_or_insert(DEFAULT_SEED);
        let (cap, gain) = if d.saturating { (1.0, 4.0) } else { (0.6, 1.0) };
        d.prob_cap.get_or_insert(cap);
        d.gain.get_or_insert(gain);
        d.floor.get_or_insert(0.05);
        let t = &mut self.train;
        t.strategy.get_or_insert(Strategy::Aggl);
        if t.lambda.is_none() {
            t.lambda_grid.get_or_insert(LAMBDA_GRID.to_vec());
        }
        t.alpha.get_or_insert(0.8);
        t.epochs.get_or_insert(DEFAULT_EPOCHS);
        t.batch_size.get_or_insert(DEFAULT_BATCH);
        t.seed.get_or_insert(DEFAULT_SEED);
        t.lr.get_or_insert(1e-3);
        t.target_split.get_or_insert(SplitKind::Train);
        self.benchmark
            .scenarios
            .get_or_insert(Scenario::PRODUCT.to_vec());
        self.benchmark
            .strategies
            .get_or_insert(Strategy::ALL.to_vec());
        self.consistency.seeds.get_or_insert([11, 12]);
        if self.out_dir.is_none() {
            let root = std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("latent-out"));
            self.out_dir = Some(root.join(command));
        }
        self
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().unwrap_or(Path::new("latent-out"))
    }

    /// Scenario spec for `scenario`, using the `[data]` section for everything else.
    pub fn scenario_spec(&self, scenario: Scenario) -> ScenarioSpec {
        let d = &self.data;
        let mut spec = ScenarioSpec::new(scenario, d.n.unwrap_or(DESK_N), d.seed.unwrap_or(DEFAULT_SEED));
        if let Some(v) = d.prob_cap {
            spec.prob_cap = v;
        }
        if let Some(v) = d.gain {
            spec.gain = v;
        }
        if let Some(v) = d.floor {
            spec.floor = v;
        }
        spec.weights = d.weights.clone();
        spec.intercepts = d.intercepts.clone();
        spec.spreads = d.spreads.clone();
        spec
    }

    pub fn scenario(&self) -> Result<Scenario, CliError> {
        self.data.scenario.ok_or_else(|| {
            CliError::Config(format!(
                "no scenario given; set data.scenario or pass --scenario (one of {})",
                scenario_list()
            ))
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.train.strategy.unwrap_or(Strategy::Aggl)
    }

    pub fn lambda_choice(&self) -> LambdaChoice {
        match self.train.lambda {
            Some(l) => LambdaChoice::Fixed(l),
            None => LambdaChoice::Grid(
                self.train
                    .lambda_grid
                    .clone()
                    .unwrap_or_else(|| LAMBDA_GRID.to_vec()),
            ),
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        let t = &self.train;
        let mut p = ProtocolConfig::new(
            t.epochs.unwrap_or(DEFAULT_EPOCHS),
            t.batch_size.unwrap_or(DEFAULT_BATCH),
            t.seed.unwrap_or(DEFAULT_SEED),
        );
        if let Some(a) = t.alpha {
            p.alpha = a;
        }
        if let Some(lr) = t.lr {
            p.lr = lr;
        }
        p.lambda = self.lambda_choice();
        p.hidden = t.hidden.clone();
        p.known_partition = t.known_partition;
        if let Some(s) = t.target_split {
            p.target_split = s;
        }
        p.target_overrides = self.targets.clone();
        p
    }

    pub fn train_config(&self) -> TrainConfig {
        self.protocol()
            .train_config(self.strategy(), self.train.seed.unwrap_or(DEFAULT_SEED))
    }
}

pub fn scenario_list() -> String {
    Scenario::ALL
        .iter()
        .map(|s| s.name())
        .collect::<Vec<_>>()
        .join(", ")
}
