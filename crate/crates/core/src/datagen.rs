//! Synthetic datasets with known per-sample probabilities.
//!
//! Features are independent zero-mean Gaussians whose standard deviations are evenly
//! spaced in `[1, 5]`. Each latent head is a sigmoid of a linear score over its own
//! feature subset; composed probabilities follow the scenario's graph preset, and
//! labels are Bernoulli draws. All randomness comes from one ChaCha stream seeded by
//! the scenario spec, so a spec regenerates bit-identically.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{email, product2, search, GraphSpec, Preset};
use crate::losses::AggregateTargets;
use crate::nn::sigmoid;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "IND_COV_KWN")]
    IndCovKwn,
    #[serde(rename = "IND_COV_UNK")]
    IndCovUnk,
    #[serde(rename = "PAR_OV_UNK")]
    ParOvUnk,
    #[serde(rename = "COM_OV")]
    ComOv,
    #[serde(rename = "EMAIL_CHAIN")]
    EmailChain,
    #[serde(rename = "SEARCH_DAG")]
    SearchDag,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::IndCovKwn,
        Scenario::IndCovUnk,
        Scenario::ParOvUnk,
        Scenario::ComOv,
        Scenario::EmailChain,
        Scenario::SearchDag,
    ];

    /// The four two-factor product scenarios.
    pub const PRODUCT: [Scenario; 4] = [
        Scenario::IndCovKwn,
        Scenario::IndCovUnk,
        Scenario::ParOvUnk,
        Scenario::ComOv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::IndCovKwn => "IND_COV_KWN",
            Scenario::IndCovUnk => "IND_COV_UNK",
            Scenario::ParOvUnk => "PAR_OV_UNK",
            Scenario::ComOv => "COM_OV",
            Scenario::EmailChain => "EMAIL_CHAIN",
            Scenario::SearchDag => "SEARCH_DAG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|x| x.name()).collect();
            Error::config(format!(
                "unknown scenario '{s}' (valid: {})",
                valid.join(", ")
            ))
        })
    }

    pub fn preset(self) -> Preset {
        match self {
            Scenario::EmailChain => Preset::EmailChain,
            Scenario::SearchDag => Preset::SearchDag,
            _ => Preset::Product2,
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            Scenario::EmailChain | Scenario::SearchDag => SURROGATE_FEATURES,
            _ => 4,
        }
    }

    /// Whether the modeler knows which features drive which head.
    pub fn partition_known(self) -> bool {
        matches!(self, Scenario::IndCovKwn)
    }

    /// Hidden layer widths of each head network.
    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            Scenario::EmailChain | Scenario::SearchDag => vec![70, 40, 20, 10],
            _ => vec![3],
        }
    }

    fn product_partition(self) -> Option<[Vec<usize>; 2]> {
        match self {
            Scenario::IndCovKwn | Scenario::IndCovUnk => Some([vec![0, 1], vec![2, 3]]),
            Scenario::ParOvUnk => Some([vec![0, 1, 2], vec![1, 2, 3]]),
            Scenario::ComOv => Some([vec![0, 1, 2, 3], vec![0, 1, 2, 3]]),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const SURROGATE_FEATURES: usize = 20;
pub const SURROGATE_SUBSET: usize = 8;
pub const SPLIT_FRACTIONS: (f64, f64) = (0.55, 0.20);
pub const MIN_HEAD_STD: f64 = 0.05;

fn default_prob_cap() -> f64 {
    0.6
}

fn default_gain() -> f64 {
    1.0
}

fn default_floor() -> f64 {
    0.05
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
    /// Upper end of every product-scenario head probability.
    #[serde(default = "default_prob_cap")]
    pub prob_cap: f64,
    /// Multiplier on linear scores; values above 1 push sigmoids into saturation.
    #[serde(default = "default_gain")]
    pub gain: f64,
    /// Lower end of a head probability as a fraction of `prob_cap`.
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// Explicit per-head weight vectors; sampled when absent.
    #[serde(default)]
    pub weights: Option<Vec<Vec<f64>>>,
    /// Per-head score offsets; scenario defaults when absent.
    #[serde(default)]
    pub intercepts: Option<Vec<f64>>,
    /// Per-head logit standard deviation of the surrogate scenarios.
    #[serde(default)]
    pub spreads: Option<Vec<f64>>,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, n: usize, seed: u64) -> Self {
        Self {
            scenario,
            n,
            seed,
            prob_cap: default_prob_cap(),
            gain: default_gain(),
            floor: default_floor(),
            weights: None,
            intercepts: None,
            spreads: None,
        }
    }

    /// Regime where every head reaches probability ~1 for some samples.
    pub fn saturating(mut self) -> Self {
        self.prob_cap = 1.0;
        self.gain = 4.0;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(Error::config(format!("need at least 100 samples, got {}", self.n)));
        }
        if !(self.prob_cap > 0.0 && self.prob_cap <= 1.0) {
            return Err(Error::config(format!("prob_cap must be in (0, 1], got {}", self.prob_cap)));
        }
        if !(self.floor >= 0.0 && self.floor < 1.0) {
            return Err(Error::config(format!("floor must be in [0, 1), got {}", self.floor)));
        }
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::config(format!("gain must be positive, got {}", self.gain)));
        }
        let heads = self.scenario.preset().head_names().len();
        if let Some(w) = &self.weights {
            if w.len() != heads {
                return Err(Error::config(format!(
                    "{} needs {heads} weight vectors, got {}",
                    self.scenario,
                    w.len()
                )));
            }
        }
        if let Some(sp) = &self.spreads {
            if sp.len() != heads || sp.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::config(format!(
                    "{} needs {heads} non-negative spreads",
                    self.scenario
                )));
            }
        }
        if let Some(b) = &self.intercepts {
            if b.len() != heads {
                return Err(Error::config(format!(
                    "{} needs {heads} intercepts, got {}",
                    self.scenario,
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
    All,
}

impl SplitKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            "all" => Ok(SplitKind::All),
            other => Err(Error::config(format!(
                "unknown split '{other}' (valid: train, val, test, all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ScenarioSpec,
    pub features: Matrix,
    /// Binary labels (0.0/1.0) of the variables visible to training.
    pub labels: BTreeMap<String, Vec<f64>>,
    /// Exact per-sample probabilities of every variable, for scoring only.
    pub true_probs: BTreeMap<String, Vec<f64>>,
    /// Feature subsets that actually generate each head.
    pub head_features: Vec<Vec<usize>>,
    /// Variables whose labels were removed with [`hide_variable`].
    pub hidden: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self, kind: SplitKind) -> Vec<usize> {
        match kind {
            SplitKind::Train => self.split.train.clone(),
            SplitKind::Val => self.split.val.clone(),
            SplitKind::Test => self.split.test.clone(),
            SplitKind::All => (0..self.len()).collect(),
        }
    }

    /// Graph spec for modelling this dataset: heads see their generating subsets
    /// when the partition is known and all features otherwise.
    pub fn graph_spec(&self, hidden: &[usize]) -> Result<GraphSpec> {
        self.graph_spec_with(hidden, self.spec.scenario.partition_known())
    }

    /// Like [`Dataset::graph_spec`], choosing explicitly whether heads see only
    /// their generative feature subsets.
    pub fn graph_spec_with(&self, hidden: &[usize], known_partition: bool) -> Result<GraphSpec> {
        let scenario = self.spec.scenario;
        let subsets: Vec<Vec<usize>> = if known_partition {
            self.head_features.clone()
        } else {
            let all: Vec<usize> = (0..self.features.cols()).collect();
            vec![all; self.head_features.len()]
        };
        scenario.preset().spec(&subsets, hidden)
    }
}

/// Approximate base rates of the email surrogate heads.
pub const EMAIL_RATES: [f64; 3] = [0.22, 0.70, 0.07];
/// Approximate base rates of the search surrogate heads.
pub const SEARCH_RATES: [f64; 5] = [0.30, 0.30, 0.10, 0.15, 0.08];
/// Default logit spread of the email surrogate heads.
pub const EMAIL_SPREADS: [f64; 3] = [1.0, 1.0, 1.0];
/// Default logit spread of the search surrogate heads.
pub const SEARCH_SPREADS: [f64; 5] = [1.0, 1.0, 1.0, 1.0, 1.0];
/// Default score offsets of the two product-scenario heads.
pub const PRODUCT_INTERCEPTS: [f64; 2] = [0.0, 0.0];

pub fn generate(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let scenario = spec.scenario;
    let d = scenario.feature_dim();
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut data = Vec::with_capacity(n * d);
    let dists: Vec<Normal<f64>> = feature_stds(d)
        .into_iter()
        .map(|s| Normal::new(0.0, s).expect("positive std"))
        .collect();
    for _ in 0..n {
        for dist in &dists {
            data.push(dist.sample(&mut rng));
        }
    }
    let features = Matrix::from_vec(n, d, data)?;
    let split = random_split(n, &mut rng);

    let (head_features, head_probs) = match scenario.product_partition() {
        Some(partition) => {
            let probs = product_heads(spec, &features, &partition, &split, &mut rng)?;
            (partition.to_vec(), probs)
        }
        None => surrogate_heads(spec, &features, &mut rng)?,
    };

    let preset = scenario.preset();
    let graph = crate::graph::build_graph(preset.spec(&head_features, &[])?)?;
    let true_probs: BTreeMap<String, Vec<f64>> = graph
        .eval_indexed(head_probs)?
        .into_iter()
        .zip(graph.variable_names())
        .map(|(v, k)| (k.clone(), v))
        .collect();

    let mut labels = BTreeMap::new();
    let draw = |p: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        p.iter().map(|&p| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
    };
    match preset {
        Preset::Product2 => {
            labels.insert(product2::Y.to_string(), draw(&true_probs[product2::Y], &mut rng));
        }
        Preset::EmailChain => {
            let send = draw(&true_probs[email::SEND], &mut rng);
            let open_given = draw(&true_probs[email::OPEN_GIVEN_SEND], &mut rng);
            let click_given = draw(&true_probs[email::CLICK_GIVEN_OPEN], &mut rng);
            let open: Vec<f64> = send.iter().zip(&open_given).map(|(a, b)| a * b).collect();
            let click: Vec<f64> = open.iter().zip(&click_given).map(|(a, b)| a * b).collect();
            labels.insert(email::SEND.to_string(), send);
            labels.insert(email::OPEN.to_string(), open);
            labels.insert(email::CLICK.to_string(), click);
        }
        Preset::SearchDag => {
            labels.insert(search::AD_CLICK.to_string(), draw(&true_probs[search::AD_CLICK], &mut rng));
            labels.insert(
                search::ORGANIC_CLICK.to_string(),
                draw(&true_probs[search::ORGANIC_CLICK], &mut rng),
            );
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        features,
        labels,
        true_probs,
        head_features,
        hidden: Vec::new(),
        split,
    })
}

/// Evenly spaced standard deviations from 1 to 5.
pub fn feature_stds(d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    (0..d).map(|k| 1.0 + 4.0 * k as f64 / (d - 1) as f64).collect()
}

fn random_split(n: usize, rng: &mut ChaCha8Rng) -> Split {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (n as f64 * SPLIT_FRACTIONS.0).round() as usize;
    let n_val = (n as f64 * SPLIT_FRACTIONS.1).round() as usize;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Split {
        train: order,
        val,
        test,
    }
}

fn linear_scores(features: &Matrix, subset: &[usize], weights: &[f64], intercept: f64) -> Vec<f64> {
    (0..features.rows())
        .map(|i| {
            let row = features.row(i);
            intercept + subset.iter().zip(weights).map(|(&c, w)| w * row[c]).sum::<f64>()
        })
        .collect()
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn product_heads(
    spec: &ScenarioSpec,
    features: &Matrix,
    partition: &[Vec<usize>; 2],
    split: &Split,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let intercepts = spec
        .intercepts
        .clone()
        .unwrap_or_else(|| PRODUCT_INTERCEPTS.to_vec());
    let low = spec.prob_cap * spec.floor;
    let span = spec.prob_cap - low;
    let probs_for = |weights: &[Vec<f64>]| -> Vec<Vec<f64>> {
        partition
            .iter()
            .zip(weights)
            .zip(&intercepts)
            .map(|((subset, w), &b)| {
                linear_scores(features, subset, w, b)
                    .into_iter()
                    .map(|s| low + span * sigmoid(spec.gain * s))
                    .collect()
            })
            .collect()
    };
    if let Some(w) = &spec.weights {
        for (subset, wv) in partition.iter().zip(w) {
            if subset.len() != wv.len() {
                return Err(Error::config(format!(
                    "weight vector of length {} for a subset of {} features",
                    wv.len(),
                    subset.len()
                )));
            }
        }
        return Ok(probs_for(w));
    }
    for _ in 0..1000 {
        let weights: Vec<Vec<f64>> = partition
            .iter()
            .map(|s| (0..s.len()).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let probs = probs_for(&weights);
        let varied = probs
            .iter()
            .all(|p| std_dev(split.test.iter().map(|&i| p[i])) >= MIN_HEAD_STD);
        if varied {
            return Ok(probs);
        }
    }
    Err(Error::config(
        "could not sample head weights with enough variation",
    ))
}

/// Per-head feature subsets and true probabilities.
type HeadDraw = (Vec<Vec<usize>>, Vec<Vec<f64>>);

/// Heads of the email and search surrogates: random feature subsets, a standardized
/// linear score, and an offset solved so the head's mean matches its base rate.
fn surrogate_heads(
    spec: &ScenarioSpec,
    features: &Matrix,
    rng: &mut ChaCha8Rng,
) -> Result<HeadDraw> {
    let (rates, default_spreads): (&[f64], &[f64]) = match spec.scenario {
        Scenario::EmailChain => (&EMAIL_RATES, &EMAIL_SPREADS),
        _ => (&SEARCH_RATES, &SEARCH_SPREADS),
    };
    let spreads = spec.spreads.as_deref().unwrap_or(default_spreads);
    let stds = feature_stds(features.cols());
    let mut subsets = Vec::with_capacity(rates.len());
    let mut probs = Vec::with_capacity(rates.len());
    for (h, &rate) in rates.iter().enumerate() {
        let mut subset = index::sample(rng, features.cols(), SURROGATE_SUBSET).into_vec();
        subset.sort_unstable();
        let weights: Vec<f64> = match &spec.weights {
            Some(w) => {
                if w[h].len() != subset.len() {
                    return Err(Error::config(format!(
                        "surrogate head {h} needs {} weights, got {}",
                        subset.len(),
                        w[h].len()
                    )));
                }
                w[h].clone()
            }
            None => (0..subset.len()).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        };
        let score_std = subset
            .iter()
            .zip(&weights)
            .map(|(&c, w)| (w * stds[c]).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        let scores: Vec<f64> = linear_scores(features, &subset, &weights, 0.0)
            .into_iter()
            .map(|s| spec.gain * spreads[h] * s / score_std)
            .collect();
        let offset = match &spec.intercepts {
            Some(b) => b[h],
            None => solve_offset(&scores, rate),
        };
        probs.push(scores.iter().map(|&s| sigmoid(s + offset)).collect());
        subsets.push(subset);
    }
    Ok((subsets, probs))
}

/// Bisection for the offset `b` with `mean(sigmoid(s + b)) == rate`.
fn solve_offset(scores: &[f64], rate: f64) -> f64 {
    let mean_at = |b: f64| scores.iter().map(|&s| sigmoid(s + b)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Removes a variable's labels; its true probabilities stay for scoring.
pub fn hide_variable(ds: &Dataset, name: &str) -> Result<Dataset> {
    if !ds.labels.contains_key(name) {
        return Err(Error::config(format!(
            "cannot hide '{name}': it is not an observed label"
        )));
    }
    let mut out = ds.clone();
    out.labels.remove(name);
    out.hidden.push(name.to_string());
    Ok(out)
}

/// Population rates for every variable on a split: label means where labels are
/// visible, true-probability means otherwise.
pub fn true_aggregates(ds: &Dataset, split: SplitKind) -> Result<AggregateTargets> {
    let rows = ds.indices(split);
    if rows.is_empty() {
        return Err(Error::config("aggregate targets over an empty split"));
    }
    let mean = |v: &[f64]| rows.iter().map(|&i| v[i]).sum::<f64>() / rows.len() as f64;
    Ok(ds
        .true_probs
        .iter()
        .map(|(name, p)| {
            let rate = match ds.labels.get(name) {
                Some(labels) => mean(labels),
                None => mean(p),
            };
            (name.clone(), rate)
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    spec: ScenarioSpec,
    head_features: Vec<Vec<usize>>,
    hidden: Vec<String>,
    split: Split,
}

/// Sidecar path stored next to a dataset table.
pub fn sidecar_path(table: &Path) -> PathBuf {
    let mut name = table.file_stem().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    table.with_file_name(name)
}

/// Writes the table (`x0..`, labels, `p_` columns) and its JSON sidecar.
pub fn write_dataset(ds: &Dataset, table: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(table)?));
    let d = ds.features.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend(ds.labels.keys().cloned());
    header.extend(ds.true_probs.keys().map(|k| format!("p_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..ds.len() {
        record.clear();
        record.extend(ds.features.row(i).iter().map(|v| v.to_string()));
        record.extend(ds.labels.values().map(|l| (l[i] as u8).to_string()));
        record.extend(ds.true_probs.values().map(|p| p[i].to_string()));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;

    let sidecar = Sidecar {
        spec: ds.spec.clone(),
        head_features: ds.head_features.clone(),
        hidden: ds.hidden.clone(),
        split: ds.split.clone(),
    };
    let mut f = BufWriter::new(File::create(sidecar_path(table))?);
    serde_json::to_writer_pretty(&mut f, &sidecar).map_err(|e| Error::Parse(e.to_string()))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("dataset table: {e}"))
}

pub fn read_dataset(table: &Path) -> Result<Dataset> {
    let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(sidecar_path(table))?))
        .map_err(|e| Error::Parse(format!("dataset sidecar: {e}")))?;
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(table)?));
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    #[derive(Clone, Copy)]
    enum Col {
        Feature,
        Label,
        Prob,
    }
    let kinds: Vec<Col> = header
        .iter()
        .map(|h| {
            if h.starts_with('x') && h[1..].parse::<usize>().is_ok() {
                Col::Feature
            } else if h.starts_with("p_") {
                Col::Prob
            } else {
                Col::Label
            }
        })
        .collect();
    let d = kinds.iter().filter(|k| matches!(k, Col::Feature)).count();
    let mut data = Vec::new();
    let mut labels: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut probs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(Error::Parse(format!("row {rows} has {} fields", rec.len())));
        }
        for ((field, name), kind) in rec.iter().zip(&header).zip(&kinds) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse(format!("row {rows}, column {name}: '{field}'")))?;
            match kind {
                Col::Feature => data.push(v),
                Col::Label => {
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Parse(format!("label {name} row {rows} is not 0/1")));
                    }
                    labels.entry(name.clone()).or_default().push(v)
                }
                Col::Prob => probs.entry(name[2..].to_string()).or_default().push(v),
            }
        }
        rows += 1;
    }
    let ds = Dataset {
        spec: sidecar.spec,
        features: Matrix::from_vec(rows, d, data)?,
        labels,
        true_probs: probs,
        head_features: sidecar.head_features,
        hidden: sidecar.hidden,
        split: sidecar.split,
    };
    let mut seen = vec![false; rows];
    for &i in ds.split.train.iter().chain(&ds.split.val).chain(&ds.split.test) {
        if i >= rows || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Parse("split indices are not a partition of the rows".into()));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Parse("split indices do not cover every row".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn full_scale_split_sizes() {
        let ds = generate(&ScenarioSpec::new(Scenario::IndCovKwn, 100_000, 1)).unwrap();
        assert_eq!(
            (ds.split.train.len(), ds.split.val.len(), ds.split.test.len()),
            (55_000, 20_000, 25_000)
        );
    }

    #[test]
    fn split_is_a_partition() {
        let ds = generate(&ScenarioSpec::new(Scenario::ComOv, 1234, 5)).unwrap();
        let mut all: Vec<usize> = ds
            .split
            .train
            .iter()
            .chain(&ds.split.val)
            .chain(&ds.split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..1234).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_small_n_and_bad_cap() {
        assert!(generate(&ScenarioSpec::new(Scenario::IndCovKwn, 99, 1)).is_err());
        let mut spec = ScenarioSpec::new(Scenario::IndCovKwn, 1000, 1);
        spec.prob_cap = 0.0;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let mut spec = ScenarioSpec::new(Scenario::IndCovKwn, 1000, 1);
        spec.weights = Some(vec![vec![1.0, 1.0]]);
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn cap_bounds_head_probabilities() {
        for scenario in Scenario::PRODUCT {
            let ds = generate(&ScenarioSpec::new(scenario, 5000, 3)).unwrap();
            for name in ["Y1", "Y2"] {
                let max = ds.true_probs[name].iter().cloned().fold(0.0, f64::max);
                assert!(max <= 0.6 + 1e-9, "{scenario} {name} max {max}");
                assert!(ds.true_probs[name].iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn composite_is_exact_product() {
        let ds = generate(&ScenarioSpec::new(Scenario::ParOvUnk, 2000, 4)).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.true_probs["Y"][i], ds.true_probs["Y1"][i] * ds.true_probs["Y2"][i]);
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        for scenario in Scenario::ALL {
            let spec = ScenarioSpec::new(scenario, 500, 11);
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
    }

    #[test]
    fn feature_stds_are_evenly_spaced() {
        let s = feature_stds(4);
        let expected = [1.0, 7.0 / 3.0, 11.0 / 3.0, 5.0];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_label_rate_matches_probability() {
        let n = 20_000;
        let ds = generate(&ScenarioSpec::new(Scenario::IndCovKwn, n, 8)).unwrap();
        let p = mean(&ds.true_probs["Y"]);
        let rate = mean(&ds.labels["Y"]);
        assert!((rate - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn saturating_regime_reaches_one() {
        let ds = generate(&ScenarioSpec::new(Scenario::IndCovKwn, 20_000, 1).saturating()).unwrap();
        let both = (0..ds.len())
            .filter(|&i| ds.true_probs["Y1"][i] > 0.99 && ds.true_probs["Y2"][i] > 0.99)
            .count();
        assert!(both as f64 >= 0.001 * ds.len() as f64, "only {both} saturated rows");
    }

    #[test]
    fn calibration_by_decile() {
        let ds = generate(&ScenarioSpec::new(Scenario::ComOv, 50_000, 2)).unwrap();
        let p = &ds.true_probs["Y"];
        let y = &ds.labels["Y"];
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        for chunk in order.chunks(p.len() / 10) {
            let mp = chunk.iter().map(|&i| p[i]).sum::<f64>() / chunk.len() as f64;
            let rate = chunk.iter().map(|&i| y[i]).sum::<f64>() / chunk.len() as f64;
            let var: f64 = chunk.iter().map(|&i| p[i] * (1.0 - p[i])).sum::<f64>();
            let se = var.sqrt() / chunk.len() as f64;
            assert!((rate - mp).abs() <= 3.0 * se + 1e-12, "rate {rate} vs {mp}");
        }
    }

    #[test]
    fn surrogate_rates_are_close_to_targets() {
        let ds = generate(&ScenarioSpec::new(Scenario::EmailChain, 20_000, 3)).unwrap();
        for (name, rate) in email::HEADS.iter().zip(EMAIL_RATES) {
            assert!((mean(&ds.true_probs[*name]) - rate).abs() < 1e-6);
        }
        let open = mean(&ds.labels["Open"]);
        assert!((open - mean(&ds.true_probs["Open"])).abs() < 0.02);
        assert!(ds.labels["Open"].iter().zip(&ds.labels["Send"]).all(|(o, s)| o <= s));
        assert!(ds.labels["Click"].iter().zip(&ds.labels["Open"]).all(|(c, o)| c <= o));

        let ds = generate(&ScenarioSpec::new(Scenario::SearchDag, 5_000, 3)).unwrap();
        assert_eq!(ds.labels.len(), 2);
        assert_eq!(ds.true_probs.len(), 9);
    }

    #[test]
    fn hiding_removes_labels_once() {
        let ds = generate(&ScenarioSpec::new(Scenario::EmailChain, 1000, 3)).unwrap();
        let hidden = hide_variable(&ds, "Send").unwrap();
        assert_eq!(
            hidden.labels.keys().map(String::as_str).collect::<Vec<_>>(),
            ["Click", "Open"]
        );
        assert!(hidden.true_probs.contains_key("Send"));
        assert!(matches!(hide_variable(&hidden, "Send"), Err(Error::Config(_))));
        assert!(hide_variable(&ds, "Nope").is_err());
        let agg = true_aggregates(&hidden, SplitKind::All).unwrap();
        assert!((agg["Send"] - mean(&ds.true_probs["Send"])).abs() < 1e-15);
    }

    #[test]
    fn aggregates_use_label_means() {
        let mut ds = generate(&ScenarioSpec::new(Scenario::IndCovKwn, 100, 3)).unwrap();
        ds.labels.insert("Y".into(), vec![1.0; 100]);
        assert_eq!(true_aggregates(&ds, SplitKind::All).unwrap()["Y"], 1.0);
        let mut y = vec![0.0; 100];
        for v in y.iter_mut().step_by(2) {
            *v = 1.0;
        }
        ds.labels.insert("Y".into(), y);
        assert_eq!(true_aggregates(&ds, SplitKind::All).unwrap()["Y"], 0.5);
    }

    #[test]
    fn composed_target_close_to_composed_mean() {
        let ds = generate(&ScenarioSpec::new(Scenario::IndCovUnk, 20_000, 6)).unwrap();
        let t = true_aggregates(&ds, SplitKind::Train).unwrap();
        let rows = &ds.split.train;
        let p = rows.iter().map(|&i| ds.true_probs["Y"][i]).sum::<f64>() / rows.len() as f64;
        let bound = 3.0 * (p * (1.0 - p) / rows.len() as f64).sqrt();
        assert!((t["Y"] - p).abs() < bound);
    }

    #[test]
    fn table_round_trip() {
        let ds = generate(&ScenarioSpec::new(Scenario::SearchDag, 300, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("search.csv");
        write_dataset(&ds, &path).unwrap();
        assert!(sidecar_path(&path).ends_with("search.meta.json"));
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }
}
