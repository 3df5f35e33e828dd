//! Dense feed-forward probability heads.
//!
//! Every head is a stack of [`DenseLayer`]s ending in a single sigmoid unit, so a
//! forward pass maps an `n x d` feature matrix to `n` probabilities. Outputs are
//! clamped into `[PROB_EPS, 1 - PROB_EPS]`; the clamp is part of the function, so
//! its derivative (zero outside the band) is part of the gradient.
//!
//! Weights are row-major with shape `(out_dim, in_dim)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

/// Probabilities are kept at least this far from 0 and 1.
pub const PROB_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parse(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dims must be > 0"));
        }
        if weights.len() != in_dim * out_dim || biases.len() != out_dim {
            return Err(Error::shape(format!(
                "layer {in_dim}->{out_dim} got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            activation,
            weights,
            biases,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }
}

/// A single probability head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_dim: usize,
    layers: Vec<DenseLayer>,
}

/// Activations recorded by [`Network::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    dims: Vec<usize>,
    /// `inputs[k]` is the input to layer k, `inputs[L]` the raw network output.
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

/// Gradients with the same shapes as a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub layers: Vec<LayerGradients>,
}

/// Dot product with four independent accumulators so the loop vectorises.
/// The summation order is fixed, so results stay bit-reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    /// Parameters in the canonical order: per layer, weights then biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|g| g.is_finite()))
    }
}

/// Builds a network with uniform `±1/sqrt(fan_in)` weights and zero biases.
///
/// `layer_dims` lists the input dimension followed by every layer's width; the last
/// width must be 1 and the last activation sigmoid.
pub fn init_network(layer_dims: &[usize], activations: &[Activation], seed: u64) -> Result<Network> {
    if layer_dims.len() < 2 {
        return Err(Error::config(format!(
            "network needs at least 2 layer dims, got {layer_dims:?}"
        )));
    }
    if activations.len() != layer_dims.len() - 1 {
        return Err(Error::config(format!(
            "{} layers need {} activations, got {}",
            layer_dims.len() - 1,
            layer_dims.len() - 1,
            activations.len()
        )));
    }
    if *layer_dims.last().unwrap() != 1 {
        return Err(Error::config("a probability head must end in exactly one unit"));
    }
    if *activations.last().unwrap() != Activation::Sigmoid {
        return Err(Error::config("a probability head must end in a sigmoid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(activations.len());
    for (w, &act) in layer_dims.windows(2).zip(activations) {
        let (fan_in, fan_out) = (w[0], w[1]);
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::config("layer dims must be > 0"));
        }
        let limit = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        layers.push(DenseLayer::new(fan_in, fan_out, act, weights, vec![0.0; fan_out])?);
    }
    Network::from_layers(layers)
}

impl Network {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::config("network has no layers"))?;
        let input_dim = first.in_dim;
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        let last = layers.last().unwrap();
        if last.out_dim != 1 || last.activation != Activation::Sigmoid {
            return Err(Error::config(
                "final layer must have one sigmoid output",
            ));
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// Input dim followed by every layer's output dim.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Reads parameter `idx` in the canonical order of [`ParamGradients::flatten`].
    pub fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.weights.len() {
                return l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                return l.biases[idx];
            }
            idx -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                l.weights[idx] = value;
                return;
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                l.biases[idx] = value;
                return;
            }
            idx -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|p| p.is_finite()))
    }

    /// Probabilities only; no cache is kept.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<f64>> {
        self.forward(features).map(|(p, _)| p)
    }

    pub fn forward(&self, features: &Matrix) -> Result<(Vec<f64>, ForwardCache)> {
        if features.cols() != self.input_dim {
            return Err(Error::shape(format!(
                "network expects {} features, got {}",
                self.input_dim,
                features.cols()
            )));
        }
        let n = features.rows();
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        inputs.push(features.as_slice().to_vec());
        for layer in &self.layers {
            let x = inputs.last().unwrap();
            let mut z = vec![0.0; n * layer.out_dim];
            for i in 0..n {
                let xi = &x[i * layer.in_dim..(i + 1) * layer.in_dim];
                let zi = &mut z[i * layer.out_dim..(i + 1) * layer.out_dim];
                for (o, zo) in zi.iter_mut().enumerate() {
                    let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    *zo = layer.biases[o] + dot(w, xi);
                }
            }
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre_activations.push(z);
            inputs.push(a);
        }
        let probs = inputs.last().unwrap().iter().map(|&p| clamp_prob(p)).collect();
        Ok((
            probs,
            ForwardCache {
                rows: n,
                dims: self.dims(),
                inputs,
                pre_activations,
            },
        ))
    }

    /// Gradient of `sum_i upstream[i] * output[i]` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<ParamGradients> {
        if cache.dims != self.dims() || cache.inputs.len() != self.layers.len() + 1 {
            return Err(Error::Internal(
                "forward cache was produced by a different network".into(),
            ));
        }
        if upstream.len() != cache.rows {
            return Err(Error::Internal(format!(
                "upstream gradient has {} rows, cache has {}",
                upstream.len(),
                cache.rows
            )));
        }
        let n = cache.rows;
        let mut grads = ParamGradients::zeros_like(self);

        // Through the output clamp: zero derivative outside the band.
        let raw_out = cache.inputs.last().unwrap();
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(raw_out)
            .map(|(&g, &p)| {
                if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                    g
                } else {
                    0.0
                }
            })
            .collect();

        for (k, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[k];
            let a = &cache.inputs[k + 1];
            for ((d, &zv), &av) in delta.iter_mut().zip(z).zip(a) {
                *d *= layer.activation.derivative(zv, av);
            }
            let x = &cache.inputs[k];
            let lg = &mut grads.layers[k];
            for i in 0..n {
                let xi = &x[i * layer.in_dim..(i + 1) * layer.in_dim];
                let di = &delta[i * layer.out_dim..(i + 1) * layer.out_dim];
                for (o, &d) in di.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    lg.biases[o] += d;
                    let gw = &mut lg.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (g, &xv) in gw.iter_mut().zip(xi) {
                        *g += d * xv;
                    }
                }
            }
            if k == 0 {
                break;
            }
            let mut upstream_x = vec![0.0; n * layer.in_dim];
            for i in 0..n {
                let di = &delta[i * layer.out_dim..(i + 1) * layer.out_dim];
                let ux = &mut upstream_x[i * layer.in_dim..(i + 1) * layer.in_dim];
                for (o, &d) in di.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (u, &wv) in ux.iter_mut().zip(w) {
                        *u += d * wv;
                    }
                }
            }
            delta = upstream_x;
        }
        Ok(grads)
    }

    /// Text record: a header line, then per layer a header, the row-major weights and
    /// the biases, one line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "network {} {}", self.input_dim, self.layers.len());
        for l in &self.layers {
            let _ = writeln!(out, "layer {} {} {}", l.in_dim, l.out_dim, l.activation.name());
            out.push_str(&join_floats(&l.weights));
            out.push('\n');
            out.push_str(&join_floats(&l.biases));
            out.push('\n');
        }
        out
    }

    /// Parses a record written by [`Network::to_text`] from a line iterator.
    pub fn from_text_lines<'a, I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = &'a str>,
    {
        let header = next_line(lines, "network header")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "network" {
            return Err(Error::Parse(format!("bad network header '{header}'")));
        }
        let input_dim = parse_usize(fields[1])?;
        let count = parse_usize(fields[2])?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let header = next_line(lines, "layer header")?;
            let f: Vec<&str> = header.split_whitespace().collect();
            if f.len() != 4 || f[0] != "layer" {
                return Err(Error::Parse(format!("bad layer header '{header}'")));
            }
            let in_dim = parse_usize(f[1])?;
            let out_dim = parse_usize(f[2])?;
            let activation = Activation::parse(f[3])?;
            let weights = parse_floats(next_line(lines, "weights")?)?;
            let biases = parse_floats(next_line(lines, "biases")?)?;
            layers.push(DenseLayer::new(in_dim, out_dim, activation, weights, biases)?);
        }
        let net = Network::from_layers(layers)?;
        if net.input_dim != input_dim {
            return Err(Error::Parse("network header disagrees with first layer".into()));
        }
        Ok(net)
    }
}

fn join_floats(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:?}");
    }
    s
}

fn next_line<'a, I: Iterator<Item = &'a str>>(lines: &mut I, what: &str) -> Result<&'a str> {
    lines
        .next()
        .ok_or_else(|| Error::Parse(format!("unexpected end of input, expected {what}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Parse(format!("expected an integer, got '{s}'")))
}

fn parse_floats(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Parse(format!("expected a number, got '{t}'")))
        })
        .collect()
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: ParamGradients,
    second: ParamGradients,
}

impl Adam {
    pub fn new(net: &Network, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: ParamGradients::zeros_like(net),
            second: ParamGradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, net: &mut Network, grads: &ParamGradients) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.weights.len() != l.weights.len() || g.biases.len() != l.biases.len())
        {
            return Err(Error::Internal("gradient shapes do not match the network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let g = &grads.layers[k];
            let (m, v) = (&mut self.first.layers[k], &mut self.second.layers[k]);
            update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut layer.biases, &g.biases, &mut m.biases, &mut v.biases);
        }
        if !net.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameter after optimizer step {}",
                self.step
            )));
        }
        Ok(())
    }
}
