//! Dense network engine.
//!
//! Everything here is plain `f64` and plain loops: a chain of fully connected
//! layers with per-layer activations, exact reverse-mode gradients, Adam, and
//! Polyak averaging for target networks. Weight matrices are row-major with
//! shape `(output_dim, input_dim)`.

mod adam;
mod checkpoint;
mod critic;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{AdamRecord, Checkpoint, NetworkRecord, CHECKPOINT_FORMAT_VERSION};
pub use critic::{CriticLayout, CriticNet, CriticTrace};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    LeakyRelu,
    Sigmoid,
    None,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z >= 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::None => z,
        }
    }

    /// Derivative given both the pre-activation `z` and the output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z >= 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::None => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }
}

/// Check that a layer chain is non-empty, has positive widths, and links up.
pub fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Shape("network needs at least one layer".into()));
    }
    for (k, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(Error::Shape(format!("layer {k} has a zero dimension")));
        }
    }
    for (k, pair) in specs.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return Err(Error::Shape(format!(
                "layer {} outputs {} but layer {} expects {}",
                k,
                pair[0].output_dim,
                k + 1,
                pair[1].input_dim
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    spec: LayerSpec,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(spec: LayerSpec) -> Self {
        Self {
            spec,
            weights: vec![0.0; spec.input_dim * spec.output_dim],
            biases: vec![0.0; spec.output_dim],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let bound = 1.0 / (spec.input_dim as f64).sqrt();
        let mut layer = Self::zeros(spec);
        for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
            *w = rng.random_range(-bound..=bound);
        }
        layer
    }

    pub fn from_parts(spec: LayerSpec, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != spec.input_dim * spec.output_dim {
            return Err(Error::Shape(format!(
                "weight array has {} entries, expected {}x{}",
                weights.len(),
                spec.output_dim,
                spec.input_dim
            )));
        }
        if biases.len() != spec.output_dim {
            return Err(Error::Shape(format!(
                "bias array has {} entries, expected {}",
                biases.len(),
                spec.output_dim
            )));
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    fn forward_into(&self, input: &[f64], pre: &mut Vec<f64>, out: &mut Vec<f64>) {
        let n_in = self.spec.input_dim;
        pre.clear();
        out.clear();
        for (row, b) in self.weights.chunks_exact(n_in).zip(&self.biases) {
            let z = b + dot(row, input);
            pre.push(z);
            out.push(self.spec.activation.apply(z));
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[k + 1]` the output of layer `k`.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace always holds the input")
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre_activations
    }
}

/// Gradient buffers laid out like [`Parameters::param_slices`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    slices: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like<P: Parameters + ?Sized>(params: &P) -> Self {
        Self {
            slices: params
                .param_slices()
                .iter()
                .map(|s| vec![0.0; s.len()])
                .collect(),
        }
    }

    pub fn slices(&self) -> &[Vec<f64>] {
        &self.slices
    }

    pub fn slices_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.slices
    }

    pub fn fill_zero(&mut self) {
        for s in &mut self.slices {
            s.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in &mut self.slices {
            s.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices.iter().flatten().all(|g| g.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.slices.iter().flatten().all(|&g| g == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.slices
            .iter()
            .flatten()
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }

    pub fn from_slices(slices: Vec<Vec<f64>>) -> Self {
        Self { slices }
    }
}

/// Anything whose trainable state is a fixed list of `f64` slices.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;
    /// Layer descriptors in slice order; two objects with equal architecture
    /// can be blended parameter by parameter.
    fn architecture(&self) -> Vec<LayerSpec>;

    fn parameter_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// FNV-1a over the raw bit patterns of every parameter.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for s in self.param_slices() {
            for v in s {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    cache: Option<Trace>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        validate_chain(specs)?;
        Ok(Self {
            layers: specs.iter().map(|&s| Dense::init(s, rng)).collect(),
            cache: None,
        })
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_chain(specs)?;
        Ok(Self {
            layers: specs.iter().map(|&s| Dense::zeros(s)).collect(),
            cache: None,
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let specs: Vec<_> = layers.iter().map(Dense::spec).collect();
        validate_chain(&specs)?;
        Ok(Self {
            layers,
            cache: None,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Dense::spec).collect()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_dim
    }

    /// Multiply the last layer's weights and biases by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.last_mut().expect("non-empty by construction");
        last.weights.iter_mut().for_each(|w| *w *= factor);
        last.biases.iter_mut().for_each(|b| *b *= factor);
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass without touching the gradient cache.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut pre = Vec::new();
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut pre, &mut out);
            std::mem::swap(&mut cur, &mut out);
        }
        Ok(cur)
    }

    /// Forward pass returning every intermediate needed by [`Mlp::backward_trace`].
    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for layer in &self.layers {
            let mut pre = Vec::with_capacity(layer.spec.output_dim);
            let mut out = Vec::with_capacity(layer.spec.output_dim);
            layer.forward_into(activations.last().unwrap(), &mut pre, &mut out);
            pre_activations.push(pre);
            activations.push(out);
        }
        Ok(Trace {
            activations,
            pre_activations,
        })
    }

    /// Forward pass that caches intermediates for a following [`Mlp::backward`].
    pub fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(input)?;
        let out = trace.output().to_vec();
        self.cache = Some(trace);
        Ok(out)
    }

    /// Gradients of `upstream · output` w.r.t. every parameter and the input,
    /// using the intermediates cached by the last [`Mlp::forward`].
    pub fn backward(&self, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let trace = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.backward_trace(trace, upstream, Some(&mut grads))?;
        Ok((grads, input_grad))
    }

    /// Reverse pass over `trace`. Parameter gradients are *accumulated* into
    /// `grads` when given; the input gradient is returned.
    pub fn backward_trace(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grads: Option<&mut Gradients>,
    ) -> Result<Vec<f64>> {
        self.backward_slices(trace, upstream, grads.map(|g| g.slices.as_mut_slice()))
    }

    pub(crate) fn backward_slices(
        &self,
        trace: &Trace,
        upstream: &[f64],
        mut grads: Option<&mut [Vec<f64>]>,
    ) -> Result<Vec<f64>> {
        if trace.pre_activations.len() != self.layers.len()
            || trace.input().len() != self.input_dim()
        {
            return Err(Error::Shape("trace does not belong to this network".into()));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has length {}, network outputs {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != 2 * self.layers.len() {
                return Err(Error::Shape("gradient buffer layout mismatch".into()));
            }
        }

        let mut delta = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let n_in = layer.spec.input_dim;
            let act = layer.spec.activation;
            let z = &trace.pre_activations[k];
            let a_out = &trace.activations[k + 1];
            let a_in = &trace.activations[k];
            for ((d, &zi), &ai) in delta.iter_mut().zip(z).zip(a_out) {
                *d *= act.derivative(zi, ai);
            }
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = g.split_at_mut(2 * k + 1);
                let gw = &mut gw[2 * k];
                let gb = &mut gb[0];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        gb[o] += d;
                        axpy(d, a_in, &mut gw[o * n_in..(o + 1) * n_in]);
                    }
                }
            }
            let mut prev = vec![0.0; n_in];
            for (row, &d) in layer.weights.chunks_exact(n_in).zip(&delta) {
                if d != 0.0 {
                    axpy(d, row, &mut prev);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

impl Parameters for Mlp {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    fn architecture(&self) -> Vec<LayerSpec> {
        self.specs()
    }
}

/// Polyak averaging: every target parameter becomes
/// `tau * behavior + (1 - tau) * target`.
pub fn soft_update<P: Parameters>(target: &mut P, behavior: &P, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    if target.architecture() != behavior.architecture() {
        return Err(Error::Shape(
            "soft update between different architectures".into(),
        ));
    }
    let keep = 1.0 - tau;
    for (t, b) in target
        .param_slices_mut()
        .into_iter()
        .zip(behavior.param_slices())
    {
        if t.len() != b.len() {
            return Err(Error::Shape("parameter slice length mismatch".into()));
        }
        for (ti, bi) in t.iter_mut().zip(b) {
            *ti = tau * bi + keep * *ti;
        }
    }
    Ok(())
}
