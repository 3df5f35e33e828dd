//! Mini-batch training of every head of an event graph, and the experiment
//! protocols built on it.
//!
//! A run is fully determined by `(graph, dataset, config)`: head initialisation,
//! shuffling and batch order all derive from `TrainConfig::seed`. The returned
//! parameters are those of the epoch with the lowest validation total loss.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{hide_variable, true_aggregates, Dataset, Scenario, ScenarioSpec, SplitKind};
use crate::graph::{build_graph, email, search, EventGraph, ScaleDiagnostic};
use crate::losses::{
    total_loss, AggregateTargets, BatchLabels, LossReport, Objective, SmoothingState, Strategy,
};
use crate::metrics::{self, ConsistencyReport, EvalReport, Role, VariableScore};
use crate::nn::{init_network, Adam, Network};
use crate::{Error, Result};

/// Default λ grid searched by the benchmark protocols.
pub const LAMBDA_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

fn default_alpha() -> f64 {
    0.8
}

fn default_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

impl TrainConfig {
    pub fn new(strategy: Strategy, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            strategy,
            lambda: 0.0,
            alpha: default_alpha(),
            epochs,
            batch_size,
            seed,
            lr: default_lr(),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be a non-negative number, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A trained head and the feature columns it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub name: String,
    pub features: Vec<usize>,
    pub net: Network,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub heads: Vec<TrainedHead>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossReport,
    pub val: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation total (earliest on ties).
    pub best_epoch: Option<usize>,
    pub smoothing: Option<SmoothingState>,
}

impl TrainedModel {
    /// Fresh heads for `graph`, initialised from `seed`.
    pub fn init(graph: &EventGraph, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = graph
            .heads()
            .iter()
            .map(|h| {
                let net = init_network(&h.layer_dims(), &h.activations(), rng.random())?;
                Ok(TrainedHead {
                    name: h.name.clone(),
                    features: h.features.clone(),
                    net,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    /// Checks that the heads line up with a graph's heads.
    pub fn check_graph(&self, graph: &EventGraph) -> Result<()> {
        let ok = self.heads.len() == graph.heads().len()
            && self.heads.iter().zip(graph.heads()).all(|(m, g)| {
                m.name == g.name && m.features == g.features && m.net.dims() == g.layer_dims()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::config("model heads do not match the graph"))
        }
    }

    /// Every graph variable on the given rows, indexed like the graph's variables.
    pub fn predict_rows(&self, graph: &EventGraph, ds: &Dataset, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let heads = self
            .heads
            .iter()
            .map(|h| h.net.predict(&ds.features.select(rows, &h.features)))
            .collect::<Result<Vec<_>>>()?;
        graph.eval_indexed(heads)
    }

    /// Named predictions on a split.
    pub fn predict(
        &self,
        graph: &EventGraph,
        ds: &Dataset,
        split: SplitKind,
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        let values = self.predict_rows(graph, ds, &ds.indices(split))?;
        Ok(graph.variable_names().iter().cloned().zip(values).collect())
    }

    /// Text record: one `head <name> <features...>` line followed by the network.
    pub fn to_text(&self) -> String {
        let mut out = format!("model {}\n", self.heads.len());
        for h in &self.heads {
            let feats: Vec<String> = h.features.iter().map(usize::to_string).collect();
            out.push_str(&format!("head {} {}\n", h.name, feats.join(" ")));
            out.push_str(&h.net.to_text());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let count: usize = header
            .strip_prefix("model ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad model header '{header}'")))?;
        let mut heads = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("missing head line".into()))?;
            let mut fields = line.split_whitespace();
            if fields.next() != Some("head") {
                return Err(Error::Parse(format!("bad head line '{line}'")));
            }
            let name = fields
                .next()
                .ok_or_else(|| Error::Parse("head without a name".into()))?
                .to_string();
            let features = fields
                .map(|f| f.parse().map_err(|_| Error::Parse(format!("bad feature index '{f}'"))))
                .collect::<Result<Vec<usize>>>()?;
            let net = Network::from_text_lines(&mut lines)?;
            heads.push(TrainedHead { name, features, net });
        }
        Ok(Self { heads })
    }
}

fn gather_labels(graph: &EventGraph, ds: &Dataset, rows: &[usize]) -> Result<BatchLabels> {
    graph
        .observed_nodes()
        .map(|node| {
            let all = ds.labels.get(&node.name).ok_or_else(|| {
                Error::config(format!("dataset has no labels for observed node '{}'", node.name))
            })?;
            Ok((node.name.clone(), rows.iter().map(|&i| all[i]).collect()))
        })
        .collect()
}

/// Loss on a whole split at once; aggregate strategies use raw (unsmoothed) means.
pub fn evaluate_loss(
    model: &TrainedModel,
    graph: &EventGraph,
    ds: &Dataset,
    rows: &[usize],
    cfg: &TrainConfig,
    targets: Option<&AggregateTargets>,
) -> Result<LossReport> {
    let values = model.predict_rows(graph, ds, rows)?;
    let labels = gather_labels(graph, ds, rows)?;
    let strategy = match cfg.strategy {
        Strategy::Sagg => Strategy::Aggl,
        s => s,
    };
    let objective = Objective {
        strategy,
        lambda: cfg.lambda,
        targets,
    };
    Ok(total_loss(graph, &values, &labels, objective, None)?.report)
}

/// Trains every head of `graph` on the training split of `ds`.
///
/// `targets` feeds the aggregate term; it is required for AGGL and SAGG and, when
/// given under BCEL, only reported.
pub fn train(
    graph: &EventGraph,
    ds: &Dataset,
    cfg: &TrainConfig,
    targets: Option<&AggregateTargets>,
) -> Result<(TrainedModel, TrainHistory)> {
    cfg.validate()?;
    graph.check_feature_dim(ds.features.cols())?;
    if cfg.strategy.uses_aggregates() && targets.is_none() {
        return Err(Error::config(format!("{} needs aggregate targets", cfg.strategy)));
    }
    if ds.split.train.is_empty() || ds.split.val.is_empty() {
        return Err(Error::config("training and validation splits must be non-empty"));
    }
    // fail on missing labels before any work
    gather_labels(graph, ds, &ds.split.train[..1])?;

    let mut model = TrainedModel::init(graph, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut optimizers: Vec<Adam> = model.heads.iter().map(|h| Adam::new(&h.net, cfg.lr)).collect();
    let mut smoothing = match cfg.strategy {
        Strategy::Sagg => Some(SmoothingState::new(cfg.alpha)?),
        _ => None,
    };
    let objective = Objective {
        strategy: cfg.strategy,
        lambda: cfg.lambda,
        targets,
    };
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        smoothing: None,
    };
    let mut best: Option<(f64, TrainedModel)> = None;
    let mut order = ds.split.train.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mut caches = Vec::with_capacity(model.heads.len());
            let mut head_values = Vec::with_capacity(model.heads.len());
            for h in &model.heads {
                let (p, cache) = h.net.forward(&ds.features.select(rows, &h.features))?;
                head_values.push(p);
                caches.push(cache);
            }
            let values = graph.eval_indexed(head_values)?;
            let labels = gather_labels(graph, ds, rows)?;
            let out = total_loss(graph, &values, &labels, objective, smoothing.as_ref()).map_err(
                |e| match e {
                    Error::Numerical(msg) => {
                        Error::Numerical(format!("epoch {epoch}, batch {b}: {msg}"))
                    }
                    other => other,
                },
            )?;
            for (k, h) in model.heads.iter_mut().enumerate() {
                let grads = h.net.backward(&caches[k], &out.head_grads[k])?;
                optimizers[k].step(&mut h.net, &grads).map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!(
                        "epoch {epoch}, batch {b}, head '{}': {msg}",
                        h.name
                    )),
                    other => other,
                })?;
            }
            if let Some(next) = out.smoothing {
                smoothing = Some(next);
            }
            let w = rows.len() as f64;
            sums.0 += w * out.report.bce;
            sums.1 += w * out.report.aggregate;
            sums.2 += w;
        }
        let train_report = LossReport::new(sums.0 / sums.2, sums.1 / sums.2, objective_lambda(cfg));
        let val = evaluate_loss(&model, graph, ds, &ds.split.val, cfg, targets)?;
        if !val.total.is_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: non-finite validation loss")));
        }
        if best.as_ref().is_none_or(|(v, _)| val.total < *v) {
            best = Some((val.total, model.clone()));
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(EpochRecord {
            epoch,
            train: train_report,
            val,
        });
    }
    history.smoothing = smoothing;
    let model = best.map_or(model, |(_, m)| m);
    Ok((model, history))
}

fn objective_lambda(cfg: &TrainConfig) -> f64 {
    match cfg.strategy {
        Strategy::Bcel => 0.0,
        _ => cfg.lambda,
    }
}

/// Scores every variable of the graph that has a known truth.
pub fn evaluate(
    model: &TrainedModel,
    graph: &EventGraph,
    ds: &Dataset,
    split: SplitKind,
    strategy: &str,
) -> Result<EvalReport> {
    let rows = ds.indices(split);
    let values = model.predict_rows(graph, ds, &rows)?;
    let observed: Vec<&str> = graph.observed_nodes().map(|n| n.name.as_str()).collect();
    let mut scores = Vec::new();
    for (name, est) in graph.variable_names().iter().zip(&values) {
        let Some(truth_all) = ds.true_probs.get(name) else {
            continue;
        };
        let truth: Vec<f64> = rows.iter().map(|&i| truth_all[i]).collect();
        let m = metrics::mape(est, &truth)?;
        let role = if observed.contains(&name.as_str()) && ds.labels.contains_key(name) {
            Role::Observed
        } else {
            Role::Unobserved
        };
        scores.push(VariableScore {
            variable: name.clone(),
            role,
            mse: metrics::mse(est, &truth)?,
            mape: m.value,
            mape_filtered: m.filtered,
        });
    }
    Ok(EvalReport {
        strategy: strategy.to_string(),
        test_size: rows.len(),
        scores,
    })
}

/// Per-head ratio diagnostics on a split.
pub fn scale_diagnostics(
    model: &TrainedModel,
    graph: &EventGraph,
    ds: &Dataset,
    split: SplitKind,
) -> Result<BTreeMap<String, ScaleDiagnostic>> {
    let pred = model.predict(graph, ds, split)?;
    let rows = ds.indices(split);
    graph
        .heads()
        .iter()
        .filter_map(|h| ds.true_probs.get(&h.name).map(|t| (h, t)))
        .map(|(h, t)| {
            let truth: Vec<f64> = rows.iter().map(|&i| t[i]).collect();
            Ok((h.name.clone(), crate::graph::scale_diagnostic(&pred[&h.name], &truth)?))
        })
        .collect()
}

/// How λ is chosen for aggregate strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    Fixed(f64),
    /// Train once per value; keep the run with the lowest validation total loss.
    Grid(Vec<f64>),
}

impl LambdaChoice {
    fn values(&self) -> Vec<f64> {
        match self {
            LambdaChoice::Fixed(l) => vec![*l],
            LambdaChoice::Grid(g) => g.clone(),
        }
    }
}

/// One training run after λ selection.
#[derive(Debug, Clone)]
pub struct SelectedRun {
    pub lambda: f64,
    pub model: TrainedModel,
    pub history: TrainHistory,
    pub val_total: f64,
}

/// Trains `cfg.strategy` once per candidate λ (BCEL trains once) and keeps the run
/// with the lowest best-epoch validation total loss; earlier candidates win ties.
pub fn train_selecting_lambda(
    graph: &EventGraph,
    ds: &Dataset,
    cfg: &TrainConfig,
    lambda: &LambdaChoice,
    targets: Option<&AggregateTargets>,
) -> Result<SelectedRun> {
    let candidates = match cfg.strategy {
        Strategy::Bcel => vec![0.0],
        _ => lambda.values(),
    };
    if candidates.is_empty() {
        return Err(Error::config("empty lambda grid"));
    }
    let runs = candidates
        .par_iter()
        .map(|&l| {
            let cfg = TrainConfig {
                lambda: l,
                ..cfg.clone()
            };
            let (model, history) = train(graph, ds, &cfg, targets)?;
            let val_total = history
                .best_epoch
                .map_or(f64::INFINITY, |b| history.epochs[b].val.total);
            Ok(SelectedRun {
                lambda: l,
                model,
                history,
                val_total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = None::<SelectedRun>;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.val_total < b.val_total) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Shared settings of the experiment protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha: f64,
    pub lr: f64,
    pub lambda: LambdaChoice,
    /// Hidden widths of every head; scenario default when `None`.
    pub hidden: Option<Vec<usize>>,
    /// Whether heads see only their generative feature subsets; scenario default when `None`.
    pub known_partition: Option<bool>,
    /// Split whose rates become aggregate targets.
    pub target_split: SplitKind,
    /// Replaces individual aggregate targets.
    pub target_overrides: BTreeMap<String, f64>,
}

impl ProtocolConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            seed,
            alpha: default_alpha(),
            lr: default_lr(),
            lambda: LambdaChoice::Grid(LAMBDA_GRID.to_vec()),
            hidden: None,
            known_partition: None,
            target_split: SplitKind::Train,
            target_overrides: BTreeMap::new(),
        }
    }

    pub fn train_config(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            lambda: 0.0,
            alpha: self.alpha,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            lr: self.lr,
        }
    }

    fn hidden_for(&self, scenario: Scenario) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| scenario.default_hidden())
    }

    /// Graph for `ds` under these settings.
    pub fn graph(&self, ds: &Dataset) -> Result<EventGraph> {
        let scenario = ds.spec.scenario;
        let known = self.known_partition.unwrap_or(scenario.partition_known());
        build_graph(ds.graph_spec_with(&self.hidden_for(scenario), known)?)
    }

    /// Aggregate targets for `ds`, restricted to `keep` when given.
    pub fn targets(&self, ds: &Dataset, keep: Option<&[&str]>) -> Result<AggregateTargets> {
        let mut t = true_aggregates(ds, self.target_split)?;
        if let Some(keep) = keep {
            t.retain(|k, _| keep.contains(&k.as_str()));
        }
        for (k, v) in &self.target_overrides {
            if !ds.true_probs.contains_key(k) {
                return Err(Error::config(format!("target override for unknown variable '{k}'")));
            }
            t.insert(k.clone(), *v);
        }
        Ok(t)
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkCell {
    pub scenario: Scenario,
    pub strategy: Strategy,
    pub lambda: f64,
    pub report: EvalReport,
    pub scales: BTreeMap<String, ScaleDiagnostic>,
    pub model: TrainedModel,
    pub history: TrainHistory,
}

/// Trains every (scenario, strategy) pair and scores it on the test split.
///
/// Cells run in parallel; the result order follows the input order.
pub fn run_scenario_benchmark(
    scenarios: &[ScenarioSpec],
    strategies: &[Strategy],
    proto: &ProtocolConfig,
) -> Result<Vec<BenchmarkCell>> {
    let datasets = scenarios
        .par_iter()
        .map(|spec| {
            if !Scenario::PRODUCT.contains(&spec.scenario) {
                return Err(Error::config(format!(
                    "benchmark takes the product scenarios, got {}",
                    spec.scenario
                )));
            }
            crate::datagen::generate(spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, Strategy)> = (0..scenarios.len())
        .flat_map(|i| strategies.iter().map(move |&s| (i, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(i, strategy)| {
            let ds = &datasets[i];
            let scenario = ds.spec.scenario;
            benchmark_cell(ds, strategy, proto).map_err(|e| tag_error(e, &format!("{scenario}/{strategy}")))
        })
        .collect()
}

fn tag_error(e: Error, cell: &str) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("[{cell}] {m}")),
        Error::Config(m) => Error::Config(format!("[{cell}] {m}")),
        other => other,
    }
}

/// Trains one strategy on an already generated product-scenario dataset.
pub fn benchmark_cell(ds: &Dataset, strategy: Strategy, proto: &ProtocolConfig) -> Result<BenchmarkCell> {
    let scenario = ds.spec.scenario;
    let graph = proto.graph(ds)?;
    let targets = proto.targets(ds, None)?;
    let cfg = proto.train_config(strategy, proto.seed);
    let run = train_selecting_lambda(&graph, ds, &cfg, &proto.lambda, Some(&targets))?;
    let report = evaluate(&run.model, &graph, ds, SplitKind::Test, strategy.name())?;
    let scales = scale_diagnostics(&run.model, &graph, ds, SplitKind::Test)?;
    Ok(BenchmarkCell {
        scenario,
        strategy,
        lambda: run.lambda,
        report,
        scales,
        model: run.model,
        history: run.history,
    })
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub strategy: Strategy,
    pub lambda: f64,
    pub report: EvalReport,
    pub model: TrainedModel,
}

/// Hides `Send` and recovers it from `Open` and `Click` through the email chain.
pub fn run_correctness(
    ds: &Dataset,
    strategies: &[Strategy],
    proto: &ProtocolConfig,
) -> Result<Vec<ProtocolRun>> {
    for v in email::ALL {
        if !ds.true_probs.contains_key(v) {
            return Err(Error::config(format!("correctness data lacks truth for '{v}'")));
        }
    }
    let hidden = hide_variable(ds, email::SEND)?;
    let graph = proto.graph(&hidden)?;
    let targets = proto.targets(&hidden, Some(&email::ALL))?;
    strategies
        .par_iter()
        .map(|&strategy| {
            let cfg = proto.train_config(strategy, proto.seed);
            let run = train_selecting_lambda(&graph, &hidden, &cfg, &proto.lambda, Some(&targets))
                .map_err(|e| tag_error(e, strategy.name()))?;
            let mut report = evaluate(&run.model, &graph, &hidden, SplitKind::Test, strategy.name())?;
            order_scores(&mut report, &email::ALL);
            Ok(ProtocolRun {
                strategy,
                lambda: run.lambda,
                report,
                model: run.model,
            })
        })
        .collect()
}

fn order_scores(report: &mut EvalReport, order: &[&str]) {
    report
        .scores
        .sort_by_key(|s| order.iter().position(|v| *v == s.variable).unwrap_or(usize::MAX));
}

/// Trains each strategy twice with different seeds on the search surrogate and
/// reports how often thresholded predictions agree.
pub fn run_consistency(
    ds: &Dataset,
    strategies: &[Strategy],
    proto: &ProtocolConfig,
    seeds: (u64, u64),
) -> Result<Vec<ConsistencyReport>> {
    let graph = proto.graph(ds)?;
    for v in search::TRACKED {
        if graph.variable_index(v).is_none() {
            return Err(Error::config(format!("consistency graph lacks '{v}'")));
        }
    }
    let targets = proto.targets(ds, Some(&search::TRACKED))?;
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| [(s, seeds.0), (s, seeds.1)])
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let cfg = proto.train_config(strategy, seed);
            let run = train_selecting_lambda(&graph, ds, &cfg, &proto.lambda, Some(&targets))
                .map_err(|e| tag_error(e, &format!("{strategy}/seed {seed}")))?;
            Ok((run.lambda, run.model.predict(&graph, ds, SplitKind::Test)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let observed: Vec<&str> = graph.observed_nodes().map(|n| n.name.as_str()).collect();
    strategies
        .iter()
        .enumerate()
        .map(|(k, &strategy)| {
            let ((la, a), (lb, b)) = (&runs[2 * k], &runs[2 * k + 1]);
            let agreement = search::TRACKED
                .iter()
                .map(|&v| {
                    let role = if observed.contains(&v) {
                        Role::Observed
                    } else {
                        Role::Unobserved
                    };
                    Ok((v.to_string(), role, metrics::consistency(&a[v], &b[v], 0.5)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ConsistencyReport {
                strategy: strategy.name().to_string(),
                threshold: 0.5,
                lambdas: [*la, *lb],
                agreement,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate;

    fn small(scenario: Scenario) -> (Dataset, EventGraph) {
        let ds = generate(&ScenarioSpec::new(scenario, 2000, 4)).unwrap();
        let graph = build_graph(ds.graph_spec(&[3]).unwrap()).unwrap();
        (ds, graph)
    }

    #[test]
    fn zero_epochs_returns_initial_heads() {
        let (ds, graph) = small(Scenario::IndCovKwn);
        let cfg = TrainConfig::new(Strategy::Bcel, 0, 64, 3);
        let (model, history) = train(&graph, &ds, &cfg, None).unwrap();
        assert_eq!(model, TrainedModel::init(&graph, 3).unwrap());
        assert!(history.epochs.is_empty());
        assert_eq!(history.best_epoch, None);
    }

    #[test]
    fn best_epoch_is_first_argmin_of_validation_loss() {
        let (ds, graph) = small(Scenario::IndCovUnk);
        let cfg = TrainConfig::new(Strategy::Bcel, 12, 64, 5);
        let (model, history) = train(&graph, &ds, &cfg, None).unwrap();
        let best = history.best_epoch.unwrap();
        let min = history
            .epochs
            .iter()
            .map(|e| e.val.total)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(history.epochs[best].val.total, min);
        assert!(history.epochs[..best].iter().all(|e| e.val.total > min));
        // the returned parameters reproduce the best epoch's validation loss
        let again = evaluate_loss(&model, &graph, &ds, &ds.split.val, &cfg, None).unwrap();
        assert_eq!(again.total, min);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, graph) = small(Scenario::ParOvUnk);
        let targets = true_aggregates(&ds, SplitKind::Train).unwrap();
        let cfg = TrainConfig::new(Strategy::Sagg, 3, 32, 9).with_lambda(1.0);
        let a = train(&graph, &ds, &cfg, Some(&targets)).unwrap();
        let b = train(&graph, &ds, &cfg, Some(&targets)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_lambda_aggl_trajectory_equals_bcel() {
        let (ds, graph) = small(Scenario::IndCovKwn);
        let targets = true_aggregates(&ds, SplitKind::Train).unwrap();
        let bcel = TrainConfig::new(Strategy::Bcel, 4, 50, 2);
        let aggl = TrainConfig::new(Strategy::Aggl, 4, 50, 2).with_lambda(0.0);
        let a = train(&graph, &ds, &bcel, Some(&targets)).unwrap();
        let b = train(&graph, &ds, &aggl, Some(&targets)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn aggregate_strategies_require_targets() {
        let (ds, graph) = small(Scenario::IndCovKwn);
        let cfg = TrainConfig::new(Strategy::Aggl, 1, 50, 2).with_lambda(1.0);
        assert!(matches!(train(&graph, &ds, &cfg, None), Err(Error::Config(_))));
        let bad = TrainConfig::new(Strategy::Bcel, 1, 0, 2);
        assert!(train(&graph, &ds, &bad, None).is_err());
    }

    #[test]
    fn missing_observed_labels_is_config_error() {
        let (mut ds, graph) = small(Scenario::IndCovKwn);
        ds.labels.clear();
        let cfg = TrainConfig::new(Strategy::Bcel, 1, 50, 2);
        assert!(matches!(train(&graph, &ds, &cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported_as_numerical() {
        let (ds, graph) = small(Scenario::IndCovKwn);
        let cfg = TrainConfig::new(Strategy::Aggl, 2, 50, 2).with_lambda(1e308);
        // a target far outside [0, 1] makes the weighted term overflow
        let targets: AggregateTargets = [("Y1".to_string(), 10.0)].into_iter().collect();
        let err = train(&graph, &ds, &cfg, Some(&targets)).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        assert!(err.to_string().contains("epoch 0, batch 0"), "{err}");
    }

    #[test]
    fn untrained_model_can_be_evaluated() {
        let (ds, graph) = small(Scenario::ComOv);
        let model = TrainedModel::init(&graph, 1).unwrap();
        let report = evaluate(&model, &graph, &ds, SplitKind::Test, "BCEL").unwrap();
        assert_eq!(report.scores.len(), 3);
        assert_eq!(report.test_size, ds.split.test.len());
        assert!(report.scores.iter().all(|s| s.mape.is_finite() && s.mse >= 0.0));
        assert_eq!(report.score("Y").unwrap().role, Role::Observed);
        assert_eq!(report.score("Y1").unwrap().role, Role::Unobserved);
    }

    #[test]
    fn model_text_round_trip() {
        let (_, graph) = small(Scenario::IndCovKwn);
        let model = TrainedModel::init(&graph, 17).unwrap();
        let back = TrainedModel::from_text(&model.to_text()).unwrap();
        assert_eq!(model, back);
        back.check_graph(&graph).unwrap();
    }

    #[test]
    fn correctness_rejects_already_hidden_send() {
        let ds = generate(&ScenarioSpec::new(Scenario::EmailChain, 500, 1)).unwrap();
        let hidden = hide_variable(&ds, "Send").unwrap();
        let proto = ProtocolConfig::new(1, 64, 1);
        assert!(matches!(
            run_correctness(&hidden, &[Strategy::Bcel], &proto),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_seed_consistency_is_perfect() {
        let ds = generate(&ScenarioSpec::new(Scenario::SearchDag, 1000, 1)).unwrap();
        let mut proto = ProtocolConfig::new(2, 64, 1);
        proto.hidden = Some(vec![4]);
        proto.lambda = LambdaChoice::Fixed(1.0);
        let reports = run_consistency(&ds, &Strategy::ALL, &proto, (7, 7)).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert_eq!(r.agreement.len(), 8);
            assert!(r.agreement.iter().all(|(_, _, a)| *a == 1.0));
        }
    }

    #[test]
    fn benchmark_grid_cardinality() {
        let specs: Vec<ScenarioSpec> = Scenario::PRODUCT
            .iter()
            .map(|&s| ScenarioSpec::new(s, 400, 2))
            .collect();
        let mut proto = ProtocolConfig::new(1, 64, 1);
        proto.lambda = LambdaChoice::Fixed(1.0);
        let cells = run_scenario_benchmark(&specs, &Strategy::ALL, &proto).unwrap();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0].scenario, Scenario::IndCovKwn);
        assert_eq!(cells[0].strategy, Strategy::Bcel);
        assert_eq!(cells[11].scenario, Scenario::ComOv);
        assert_eq!(cells[11].strategy, Strategy::Sagg);
        let email = ScenarioSpec::new(Scenario::EmailChain, 400, 2);
        assert!(run_scenario_benchmark(&[email], &Strategy::ALL, &proto).is_err());
    }
}
