//! Training objectives and their gradients with respect to predicted probabilities.
//!
//! * cross-entropy summed over observed nodes, each averaged over the batch;
//! * aggregate penalty: squared gaps between batch-mean predictions and known rates;
//! * smoothed aggregate penalty: the batch means are exponentially smoothed across
//!   batches before the gap is taken.
//!
//! The history term of the smoothed mean is a constant: only the current batch
//! receives gradient, scaled by the smoothing weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::EventGraph;
use crate::nn::PROB_EPS;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "BCEL")]
    Bcel,
    #[serde(rename = "AGGL")]
    Aggl,
    #[serde(rename = "SAGG")]
    Sagg,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Bcel, Strategy::Aggl, Strategy::Sagg];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Bcel => "BCEL",
            Strategy::Aggl => "AGGL",
            Strategy::Sagg => "SAGG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown strategy '{s}' (valid: BCEL, AGGL, SAGG)")))
    }

    pub fn uses_aggregates(self) -> bool {
        !matches!(self, Strategy::Bcel)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Known population rates, keyed by variable name.
pub type AggregateTargets = BTreeMap<String, f64>;

/// Exponentially smoothed batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingState {
    pub alpha: f64,
    pub batches: u64,
    pub smoothed: BTreeMap<String, f64>,
}

impl SmoothingState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config(format!("smoothing weight must be in (0, 1], got {alpha}")));
        }
        Ok(Self {
            alpha,
            batches: 0,
            smoothed: BTreeMap::new(),
        })
    }

    /// Smoothed value that `raw` would produce, and its derivative with respect to `raw`.
    fn blend(&self, name: &str, raw: f64) -> (f64, f64) {
        match self.smoothed.get(name) {
            Some(&prev) if self.batches > 0 => {
                (self.alpha * raw + (1.0 - self.alpha) * prev, self.alpha)
            }
            _ => (raw, 1.0),
        }
    }

    pub fn update(&mut self, raw_means: &BTreeMap<String, f64>) {
        let next: BTreeMap<String, f64> = raw_means
            .iter()
            .map(|(k, &raw)| (k.clone(), self.blend(k, raw).0))
            .collect();
        self.smoothed.extend(next);
        self.batches += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bce: f64,
    pub aggregate: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(bce: f64, aggregate: f64, lambda: f64) -> Self {
        Self {
            bce,
            aggregate,
            lambda,
            total: bce + lambda * aggregate,
        }
    }
}

/// Mean binary cross-entropy and its gradient with respect to each prediction.
///
/// Predictions are clamped into `[PROB_EPS, 1 - PROB_EPS]`; clamped entries get zero
/// gradient.
pub fn bce_loss(pred: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("cross-entropy of an empty batch"));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&raw, &y) in pred.iter().zip(labels) {
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        if p == raw {
            grad.push((p - y) / (n * p * (1.0 - p)));
        } else {
            grad.push(0.0);
        }
    }
    Ok((sum / n, grad))
}

/// Sum of squared gaps between targets and batch means, with the gradient with
/// respect to each mean.
pub fn aggregate_loss(
    batch_means: &BTreeMap<String, f64>,
    targets: &AggregateTargets,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut delta = 0.0;
    let mut grads = BTreeMap::new();
    for (name, &target) in targets {
        let mean = *batch_means
            .get(name)
            .ok_or_else(|| Error::config(format!("no batch mean for aggregate target '{name}'")))?;
        let gap = target - mean;
        delta += gap * gap;
        grads.insert(name.clone(), -2.0 * gap);
    }
    Ok((delta, grads))
}

/// Returns a copy of `state` advanced by one batch of raw means.
pub fn smoothed_update(state: &SmoothingState, raw_means: &BTreeMap<String, f64>) -> SmoothingState {
    let mut next = state.clone();
    next.update(raw_means);
    next
}

/// Labels per observed node, aligned with the batch.
pub type BatchLabels = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub report: LossReport,
    /// Gradient of the total loss with respect to each head's outputs, in head order.
    pub head_grads: Vec<Vec<f64>>,
    /// Smoothing state after this batch (SAGG only).
    pub smoothing: Option<SmoothingState>,
}

/// Loss settings that stay fixed during a run.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub strategy: Strategy,
    pub lambda: f64,
    pub targets: Option<&'a AggregateTargets>,
}

/// Full objective for one batch.
///
/// `values` are all graph variables as produced by [`EventGraph::eval_indexed`].
/// Under BCEL the aggregate term is still reported when targets are supplied but
/// weighted by zero. `smoothing` is the state before this batch; it is not mutated.
pub fn total_loss(
    graph: &EventGraph,
    values: &[Vec<f64>],
    labels: &BatchLabels,
    objective: Objective<'_>,
    smoothing: Option<&SmoothingState>,
) -> Result<LossOutput> {
    let names = graph.variable_names();
    let n = values.first().map_or(0, Vec::len);
    let mut adjoints = vec![vec![0.0; n]; names.len()];

    let mut bce = 0.0;
    for node in graph.observed_nodes() {
        let idx = graph.variable_index(&node.name).expect("node of this graph");
        let y = labels
            .get(&node.name)
            .ok_or_else(|| Error::config(format!("no labels for observed node '{}'", node.name)))?;
        let (value, grad) = bce_loss(&values[idx], y)?;
        bce += value;
        adjoints[idx] = grad;
    }

    let lambda = match objective.strategy {
        Strategy::Bcel => 0.0,
        _ => objective.lambda,
    };
    if objective.strategy.uses_aggregates() && objective.targets.is_none() {
        return Err(Error::config(format!(
            "{} needs aggregate targets",
            objective.strategy
        )));
    }
    if objective.strategy == Strategy::Sagg && smoothing.is_none() {
        return Err(Error::config("SAGG needs a smoothing state"));
    }

    let mut aggregate = 0.0;
    let mut next_smoothing = None;
    if let Some(targets) = objective.targets {
        let mut raw = BTreeMap::new();
        for name in targets.keys() {
            let idx = graph.variable_index(name).ok_or_else(|| {
                Error::config(format!("aggregate target '{name}' is not a graph variable"))
            })?;
            raw.insert(name.clone(), values[idx].iter().sum::<f64>() / n as f64);
        }
        let (effective, slopes): (BTreeMap<String, f64>, BTreeMap<String, f64>) =
            match (objective.strategy, smoothing) {
                (Strategy::Sagg, Some(state)) => {
                    let mut eff = BTreeMap::new();
                    let mut slope = BTreeMap::new();
                    for (k, &r) in &raw {
                        let (v, d) = state.blend(k, r);
                        eff.insert(k.clone(), v);
                        slope.insert(k.clone(), d);
                    }
                    next_smoothing = Some(smoothed_update(state, &raw));
                    (eff, slope)
                }
                _ => {
                    let slope = raw.keys().map(|k| (k.clone(), 1.0)).collect();
                    (raw, slope)
                }
            };
        let (delta, mean_grads) = aggregate_loss(&effective, targets)?;
        aggregate = delta;
        for (name, g) in mean_grads {
            let idx = graph.variable_index(&name).expect("checked above");
            let per_sample = lambda * (g * slopes[&name]) / n as f64;
            adjoints[idx].iter_mut().for_each(|a| *a += per_sample);
        }
    }

    let report = LossReport::new(bce, aggregate, lambda);
    if !report.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (bce {}, aggregate {})",
            report.bce, report.aggregate
        )));
    }
    let head_grads = graph.backward_indexed(values, adjoints)?;
    Ok(LossOutput {
        report,
        head_grads,
        smoothing: next_smoothing,
    })
}
