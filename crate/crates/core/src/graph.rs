//! Composition of latent probability heads into observed events.
//!
//! An [`EventGraph`] names a set of latent heads (each a small network over a subset
//! of the features) and a set of composed nodes whose probabilities are closed-form
//! [`Formula`]s over heads and other nodes. Composed nodes are either *observed*
//! (per-sample labels exist) or *aggregate* (only a population rate is known).
//!
//! Evaluation and gradient routing work on dense per-sample vectors; the graph
//! itself is immutable after [`build_graph`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::nn::Activation;
use crate::{Error, Result};

/// Probability algebra over named variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    Head(String),
    /// Another composed node of the same graph.
    Node(String),
    Product(Vec<Formula>),
    Complement(Box<Formula>),
    WeightedSum(Vec<WeightedTerm>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedTerm {
    pub weight: f64,
    pub term: Formula,
}

impl Formula {
    pub fn head(name: &str) -> Self {
        Formula::Head(name.to_owned())
    }

    pub fn node(name: &str) -> Self {
        Formula::Node(name.to_owned())
    }

    pub fn product(factors: Vec<Formula>) -> Self {
        Formula::Product(factors)
    }

    pub fn complement(inner: Formula) -> Self {
        Formula::Complement(Box::new(inner))
    }

    pub fn weighted_sum(terms: Vec<(f64, Formula)>) -> Self {
        Formula::WeightedSum(
            terms
                .into_iter()
                .map(|(weight, term)| WeightedTerm { weight, term })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Per-sample labels exist and enter the cross-entropy term.
    Observed,
    /// Only an aggregate rate is available.
    Aggregate,
}

/// A latent head: which features it sees and the shape of its network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentHead {
    pub name: String,
    pub features: Vec<usize>,
    /// Hidden layer widths; the sigmoid output unit is implicit.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
}

fn default_hidden_activation() -> Activation {
    Activation::Relu
}

impl LatentHead {
    pub fn new(name: &str, features: Vec<usize>, hidden: Vec<usize>) -> Self {
        Self {
            name: name.to_owned(),
            features,
            hidden,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.features.len()];
        dims.extend(&self.hidden);
        dims.push(1);
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        let mut acts = vec![self.hidden_activation; self.hidden.len()];
        acts.push(Activation::Sigmoid);
        acts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub formula: Formula,
}

/// Unvalidated graph description, as declared in presets or config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub heads: Vec<LatentHead>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone)]
enum Expr {
    Var(usize),
    Product(Vec<Expr>),
    Complement(Box<Expr>),
    WeightedSum(Vec<(f64, Expr)>),
}

#[derive(Debug, Clone)]
pub struct EventGraph {
    spec: GraphSpec,
    /// Heads occupy variable slots `0..heads.len()`, nodes follow in declaration order.
    names: Vec<String>,
    index: HashMap<String, usize>,
    exprs: Vec<Expr>,
    /// Node positions (into `spec.nodes`) with dependencies first.
    order: Vec<usize>,
}

pub fn build_graph(spec: GraphSpec) -> Result<EventGraph> {
    let mut names = Vec::with_capacity(spec.heads.len() + spec.nodes.len());
    let mut index = HashMap::new();
    for name in spec
        .heads
        .iter()
        .map(|h| &h.name)
        .chain(spec.nodes.iter().map(|n| &n.name))
    {
        if index.insert(name.clone(), names.len()).is_some() {
            return Err(Error::config(format!("duplicate variable name '{name}'")));
        }
        names.push(name.clone());
    }
    for head in &spec.heads {
        if head.features.is_empty() {
            return Err(Error::config(format!("head '{}' has no features", head.name)));
        }
        if head.hidden.contains(&0) {
            return Err(Error::config(format!("head '{}' has an empty hidden layer", head.name)));
        }
    }
    let n_heads = spec.heads.len();
    let mut exprs = Vec::with_capacity(spec.nodes.len());
    let mut deps: Vec<Vec<usize>> = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        let mut node_deps = Vec::new();
        exprs.push(compile(&node.formula, &index, n_heads, &mut node_deps, &node.name)?);
        deps.push(node_deps);
    }
    let order = topological_order(&spec.nodes, &deps)?;

    let graph = EventGraph {
        spec,
        names,
        index,
        exprs,
        order,
    };
    for (pos, node) in graph.spec.nodes.iter().enumerate() {
        if node.kind == NodeKind::Observed && graph.heads_under(pos).is_empty() {
            return Err(Error::config(format!(
                "observed node '{}' does not depend on any head",
                node.name
            )));
        }
    }
    Ok(graph)
}

fn compile(
    f: &Formula,
    index: &HashMap<String, usize>,
    n_heads: usize,
    deps: &mut Vec<usize>,
    owner: &str,
) -> Result<Expr> {
    Ok(match f {
        Formula::Head(name) => match index.get(name) {
            Some(&i) if i < n_heads => Expr::Var(i),
            _ => {
                return Err(Error::config(format!(
                    "node '{owner}' references undeclared head '{name}'"
                )))
            }
        },
        Formula::Node(name) => match index.get(name) {
            Some(&i) if i >= n_heads => {
                deps.push(i - n_heads);
                Expr::Var(i)
            }
            _ => {
                return Err(Error::config(format!(
                    "node '{owner}' references undeclared node '{name}'"
                )))
            }
        },
        Formula::Product(fs) => {
            if fs.is_empty() {
                return Err(Error::config(format!("node '{owner}' has an empty product")));
            }
            Expr::Product(
                fs.iter()
                    .map(|f| compile(f, index, n_heads, deps, owner))
                    .collect::<Result<_>>()?,
            )
        }
        Formula::Complement(inner) => {
            Expr::Complement(Box::new(compile(inner, index, n_heads, deps, owner)?))
        }
        Formula::WeightedSum(terms) => {
            if terms.is_empty() {
                return Err(Error::config(format!("node '{owner}' has an empty weighted sum")));
            }
            let mut out = Vec::with_capacity(terms.len());
            for t in terms {
                if !t.weight.is_finite() {
                    return Err(Error::config(format!("node '{owner}' has a non-finite weight")));
                }
                out.push((t.weight, compile(&t.term, index, n_heads, deps, owner)?));
            }
            Expr::WeightedSum(out)
        }
    })
}

fn topological_order(nodes: &[NodeSpec], deps: &[Vec<usize>]) -> Result<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn visit(
        i: usize,
        nodes: &[NodeSpec],
        deps: &[Vec<usize>],
        marks: &mut [Mark],
        order: &mut Vec<usize>,
    ) -> Result<()> {
        match marks[i] {
            Mark::Done => return Ok(()),
            Mark::Active => {
                return Err(Error::config(format!(
                    "cycle through node '{}'",
                    nodes[i].name
                )))
            }
            Mark::New => {}
        }
        marks[i] = Mark::Active;
        for &d in &deps[i] {
            visit(d, nodes, deps, marks, order)?;
        }
        marks[i] = Mark::Done;
        order.push(i);
        Ok(())
    }
    let mut marks = vec![Mark::New; nodes.len()];
    let mut order = Vec::with_capacity(nodes.len());
    for i in 0..nodes.len() {
        visit(i, nodes, deps, &mut marks, &mut order)?;
    }
    Ok(order)
}

fn eval_expr(e: &Expr, vars: &[Vec<f64>], n: usize) -> Vec<f64> {
    match e {
        Expr::Var(i) => vars[*i].clone(),
        Expr::Product(fs) => {
            let mut acc = eval_expr(&fs[0], vars, n);
            for f in &fs[1..] {
                let v = eval_expr(f, vars, n);
                acc.iter_mut().zip(&v).for_each(|(a, b)| *a *= b);
            }
            acc
        }
        Expr::Complement(inner) => eval_expr(inner, vars, n).into_iter().map(|v| 1.0 - v).collect(),
        Expr::WeightedSum(terms) => {
            let mut acc = vec![0.0; n];
            for (w, t) in terms {
                let v = eval_expr(t, vars, n);
                acc.iter_mut().zip(&v).for_each(|(a, b)| *a += w * b);
            }
            acc
        }
    }
}

fn backprop_expr(e: &Expr, upstream: &[f64], vars: &[Vec<f64>], adjoints: &mut [Vec<f64>]) {
    match e {
        Expr::Var(i) => adjoints[*i]
            .iter_mut()
            .zip(upstream)
            .for_each(|(a, g)| *a += g),
        Expr::Product(fs) => {
            let n = upstream.len();
            let values: Vec<Vec<f64>> = fs.iter().map(|f| eval_expr(f, vars, n)).collect();
            // prefix/suffix products avoid dividing by factor values
            let k = values.len();
            let mut prefix = vec![vec![1.0; n]; k + 1];
            for j in 0..k {
                for i in 0..n {
                    prefix[j + 1][i] = prefix[j][i] * values[j][i];
                }
            }
            let mut suffix = vec![1.0; n];
            for j in (0..k).rev() {
                let g: Vec<f64> = (0..n).map(|i| upstream[i] * prefix[j][i] * suffix[i]).collect();
                backprop_expr(&fs[j], &g, vars, adjoints);
                for i in 0..n {
                    suffix[i] *= values[j][i];
                }
            }
        }
        Expr::Complement(inner) => {
            let g: Vec<f64> = upstream.iter().map(|g| -g).collect();
            backprop_expr(inner, &g, vars, adjoints);
        }
        Expr::WeightedSum(terms) => {
            for (w, t) in terms {
                let g: Vec<f64> = upstream.iter().map(|g| w * g).collect();
                backprop_expr(t, &g, vars, adjoints);
            }
        }
    }
}

impl EventGraph {
    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn heads(&self) -> &[LatentHead] {
        &self.spec.heads
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.spec.nodes
    }

    /// Heads first, then nodes in declaration order.
    pub fn variable_names(&self) -> &[String] {
        &self.names
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn is_head(&self, name: &str) -> bool {
        self.variable_index(name)
            .is_some_and(|i| i < self.spec.heads.len())
    }

    pub fn observed_nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.spec
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Observed)
    }

    pub fn aggregate_nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.spec
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Aggregate)
    }

    /// Checks every head's feature indices against a dataset width.
    pub fn check_feature_dim(&self, dim: usize) -> Result<()> {
        for head in &self.spec.heads {
            if let Some(&bad) = head.features.iter().find(|&&f| f >= dim) {
                return Err(Error::config(format!(
                    "head '{}' uses feature {bad} but the data has {dim} features",
                    head.name
                )));
            }
        }
        Ok(())
    }

    fn heads_under(&self, node_pos: usize) -> Vec<usize> {
        fn walk(e: &Expr, g: &EventGraph, out: &mut Vec<usize>) {
            match e {
                Expr::Var(i) if *i < g.spec.heads.len() => out.push(*i),
                Expr::Var(i) => walk(&g.exprs[*i - g.spec.heads.len()], g, out),
                Expr::Product(fs) => fs.iter().for_each(|f| walk(f, g, out)),
                Expr::Complement(inner) => walk(inner, g, out),
                Expr::WeightedSum(ts) => ts.iter().for_each(|(_, t)| walk(t, g, out)),
            }
        }
        let mut out = Vec::new();
        walk(&self.exprs[node_pos], self, &mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Evaluates every variable from head values given in head order.
    ///
    /// Returns one vector per variable, indexed like [`EventGraph::variable_names`].
    pub fn eval_indexed(&self, head_values: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
        let h = self.spec.heads.len();
        if head_values.len() != h {
            return Err(Error::Eval(format!(
                "expected {h} head vectors, got {}",
                head_values.len()
            )));
        }
        let n = head_values.first().map_or(0, Vec::len);
        if let Some((k, v)) = head_values.iter().enumerate().find(|(_, v)| v.len() != n) {
            return Err(Error::Eval(format!(
                "head '{}' has {} values, expected {n}",
                self.spec.heads[k].name,
                v.len()
            )));
        }
        let mut vars = head_values;
        vars.resize(self.names.len(), Vec::new());
        for &pos in &self.order {
            vars[h + pos] = eval_expr(&self.exprs[pos], &vars, n);
        }
        Ok(vars)
    }

    /// Routes per-variable gradients back to the heads.
    ///
    /// `values` must come from [`EventGraph::eval_indexed`]; `adjoints` holds the
    /// direct gradient of the loss with respect to each variable (zeros allowed).
    pub fn backward_indexed(
        &self,
        values: &[Vec<f64>],
        mut adjoints: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>> {
        if values.len() != self.names.len() || adjoints.len() != self.names.len() {
            return Err(Error::Eval("value/adjoint tables do not match the graph".into()));
        }
        let h = self.spec.heads.len();
        for &pos in self.order.iter().rev() {
            let upstream = std::mem::take(&mut adjoints[h + pos]);
            if upstream.is_empty() || upstream.iter().all(|&g| g == 0.0) {
                continue;
            }
            backprop_expr(&self.exprs[pos], &upstream, values, &mut adjoints);
        }
        adjoints.truncate(h);
        Ok(adjoints)
    }

    /// Evaluates the graph from named head vectors.
    ///
    /// The result maps every variable name (heads included) to its per-sample values.
    pub fn eval(&self, head_values: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, Vec<f64>>> {
        let ordered = self
            .spec
            .heads
            .iter()
            .map(|head| {
                head_values
                    .get(&head.name)
                    .cloned()
                    .ok_or_else(|| Error::Eval(format!("missing values for head '{}'", head.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let vars = self.eval_indexed(ordered)?;
        Ok(self.names.iter().cloned().zip(vars).collect())
    }

    /// Gradient of `sum over named variables of <node_grads[v], v>` with respect to
    /// every head output. Heads may appear in `node_grads` and pass straight through.
    pub fn backward(
        &self,
        head_values: &BTreeMap<String, Vec<f64>>,
        node_grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        let named = self.eval(head_values)?;
        let n = named.values().next().map_or(0, Vec::len);
        let values: Vec<Vec<f64>> = self.names.iter().map(|k| named[k].clone()).collect();
        let mut adjoints = vec![vec![0.0; n]; self.names.len()];
        for (name, g) in node_grads {
            let i = self
                .variable_index(name)
                .ok_or_else(|| Error::Eval(format!("gradient for unknown variable '{name}'")))?;
            if g.len() != n {
                return Err(Error::Eval(format!(
                    "gradient for '{name}' has {} values, expected {n}",
                    g.len()
                )));
            }
            adjoints[i] = g.clone();
        }
        let heads = self.backward_indexed(&values, adjoints)?;
        Ok(self
            .spec
            .heads
            .iter()
            .map(|h| h.name.clone())
            .zip(heads)
            .collect())
    }
}

/// Named preset graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "PRODUCT2")]
    Product2,
    #[serde(rename = "EMAIL_CHAIN")]
    EmailChain,
    #[serde(rename = "SEARCH_DAG")]
    SearchDag,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Product2, Preset::EmailChain, Preset::SearchDag];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Product2 => "PRODUCT2",
            Preset::EmailChain => "EMAIL_CHAIN",
            Preset::SearchDag => "SEARCH_DAG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown graph preset '{s}' (valid: PRODUCT2, EMAIL_CHAIN, SEARCH_DAG)"
                ))
            })
    }

    /// Head names in declaration order.
    pub fn head_names(self) -> &'static [&'static str] {
        match self {
            Preset::Product2 => &product2::HEADS,
            Preset::EmailChain => &email::HEADS,
            Preset::SearchDag => &search::HEADS,
        }
    }

    /// Builds the preset's graph spec with one feature subset per head.
    pub fn spec(self, head_features: &[Vec<usize>], hidden: &[usize]) -> Result<GraphSpec> {
        let names = self.head_names();
        if head_features.len() != names.len() {
            return Err(Error::config(format!(
                "{} needs {} feature subsets, got {}",
                self.name(),
                names.len(),
                head_features.len()
            )));
        }
        let heads = names
            .iter()
            .zip(head_features)
            .map(|(name, f)| LatentHead::new(name, f.clone(), hidden.to_vec()))
            .collect();
        let nodes = match self {
            Preset::Product2 => vec![NodeSpec {
                name: product2::Y.into(),
                kind: NodeKind::Observed,
                formula: Formula::product(vec![
                    Formula::head(product2::Y1),
                    Formula::head(product2::Y2),
                ]),
            }],
            Preset::EmailChain => vec![
                NodeSpec {
                    name: email::OPEN.into(),
                    kind: NodeKind::Observed,
                    formula: Formula::product(vec![
                        Formula::head(email::SEND),
                        Formula::head(email::OPEN_GIVEN_SEND),
                    ]),
                },
                NodeSpec {
                    name: email::CLICK.into(),
                    kind: NodeKind::Observed,
                    formula: Formula::product(vec![
                        Formula::node(email::OPEN),
                        Formula::head(email::CLICK_GIVEN_OPEN),
                    ]),
                },
            ],
            Preset::SearchDag => vec![
                NodeSpec {
                    name: search::AD_CLICK.into(),
                    kind: NodeKind::Observed,
                    formula: Formula::product(vec![
                        Formula::node(search::AD_SHOWN),
                        Formula::head(search::AD_CLICK_GIVEN_AD_SHOWN),
                    ]),
                },
                NodeSpec {
                    name: search::AD_SHOWN.into(),
                    kind: NodeKind::Aggregate,
                    formula: Formula::product(vec![
                        Formula::head(search::SEARCH),
                        Formula::head(search::AD_SHOWN_GIVEN_SEARCH),
                    ]),
                },
                NodeSpec {
                    name: search::AD_NOT_SHOWN.into(),
                    kind: NodeKind::Aggregate,
                    formula: Formula::product(vec![
                        Formula::head(search::SEARCH),
                        Formula::complement(Formula::head(search::AD_SHOWN_GIVEN_SEARCH)),
                    ]),
                },
                NodeSpec {
                    name: search::ORGANIC_CLICK.into(),
                    kind: NodeKind::Observed,
                    formula: Formula::weighted_sum(vec![
                        (
                            1.0,
                            Formula::product(vec![
                                Formula::node(search::AD_SHOWN),
                                Formula::head(search::ORGANIC_CLICK_GIVEN_AD_SHOWN),
                            ]),
                        ),
                        (
                            1.0,
                            Formula::product(vec![
                                Formula::node(search::AD_NOT_SHOWN),
                                Formula::head(search::ORGANIC_CLICK_GIVEN_AD_NOT_SHOWN),
                            ]),
                        ),
                    ]),
                },
            ],
        };
        Ok(GraphSpec { heads, nodes })
    }
}

pub mod product2 {
    pub const Y1: &str = "Y1";
    pub const Y2: &str = "Y2";
    pub const Y: &str = "Y";
    pub const HEADS: [&str; 2] = [Y1, Y2];
}

pub mod email {
    pub const SEND: &str = "Send";
    pub const OPEN_GIVEN_SEND: &str = "OpenGivenSend";
    pub const CLICK_GIVEN_OPEN: &str = "ClickGivenOpen";
    pub const OPEN: &str = "Open";
    pub const CLICK: &str = "Click";
    pub const HEADS: [&str; 3] = [SEND, OPEN_GIVEN_SEND, CLICK_GIVEN_OPEN];
    pub const ALL: [&str; 5] = [SEND, OPEN_GIVEN_SEND, OPEN, CLICK_GIVEN_OPEN, CLICK];
}

pub mod search {
    pub const SEARCH: &str = "Search";
    pub const AD_SHOWN_GIVEN_SEARCH: &str = "AdShownGivenSearch";
    pub const AD_CLICK_GIVEN_AD_SHOWN: &str = "AdClickGivenAdShown";
    pub const ORGANIC_CLICK_GIVEN_AD_SHOWN: &str = "OrganicClickGivenAdShown";
    pub const ORGANIC_CLICK_GIVEN_AD_NOT_SHOWN: &str = "OrganicClickGivenAdNotShown";
    pub const AD_SHOWN: &str = "AdShown";
    pub const AD_NOT_SHOWN: &str = "AdNotShown";
    pub const AD_CLICK: &str = "AdClick";
    pub const ORGANIC_CLICK: &str = "OrganicClick";
    pub const HEADS: [&str; 5] = [
        SEARCH,
        AD_SHOWN_GIVEN_SEARCH,
        AD_CLICK_GIVEN_AD_SHOWN,
        ORGANIC_CLICK_GIVEN_AD_SHOWN,
        ORGANIC_CLICK_GIVEN_AD_NOT_SHOWN,
    ];
    /// The variables compared across runs and penalised in the aggregate term.
    pub const TRACKED: [&str; 8] = [
        SEARCH,
        AD_SHOWN_GIVEN_SEARCH,
        AD_SHOWN,
        ORGANIC_CLICK_GIVEN_AD_SHOWN,
        ORGANIC_CLICK_GIVEN_AD_NOT_SHOWN,
        ORGANIC_CLICK,
        AD_CLICK_GIVEN_AD_SHOWN,
        AD_CLICK,
    ];
}

/// How far an estimated head is from a constant multiple of the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleDiagnostic {
    pub mean_ratio: f64,
    /// Population standard deviation of the ratio divided by its mean.
    pub cv: f64,
    pub used: usize,
    pub excluded: usize,
}

pub const RATIO_TRUTH_FLOOR: f64 = 1e-6;

pub fn scale_diagnostic(estimated: &[f64], truth: &[f64]) -> Result<ScaleDiagnostic> {
    if estimated.len() != truth.len() {
        return Err(Error::shape(format!(
            "estimate has {} values, truth has {}",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated.is_empty() {
        return Err(Error::config("scale diagnostic of an empty vector"));
    }
    let ratios: Vec<f64> = estimated
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t > RATIO_TRUTH_FLOOR)
        .map(|(e, t)| e / t)
        .collect();
    if ratios.is_empty() {
        return Err(Error::config("every truth value is below the ratio floor"));
    }
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(ScaleDiagnostic {
        mean_ratio: mean,
        cv: var.sqrt() / mean,
        used: ratios.len(),
        excluded: truth.len() - ratios.len(),
    })
}
