//! Fully-connected classifier with per-layer representation capture.
//!
//! Layer `ℓ` (1-based) maps `d_{ℓ-1} → d_ℓ` with weight `layer{ℓ}.weight`
//! (row-major `[d_ℓ, d_{ℓ-1}]`) and bias `layer{ℓ}.bias`. Hidden layers apply
//! the configured activation; layer `L` emits raw logits. Every layer output
//! is stored as `f32`; dot products accumulate in `f64`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ActivationVector, ParamIndex, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the stored post-activation output.
    #[inline]
    fn derivative_from_output(self, h: f32) -> f64 {
        match self {
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let h = h as f64;
                1.0 - h * h
            }
        }
    }
}

/// Architecture of an MLP: widths `[d_0, d_1, …, d_L]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::Domain(format!(
                "a model needs at least an input and an output width, got {layer_widths:?}"
            )));
        }
        if layer_widths.contains(&0) {
            return Err(Error::Domain(format!(
                "layer widths must be positive, got {layer_widths:?}"
            )));
        }
        Ok(Self {
            layer_widths,
            activation,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of affine layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        self.layer_widths[self.depth()]
    }

    pub fn width(&self, layer: usize) -> usize {
        self.layer_widths[layer]
    }

    /// `p = Σ_ℓ (d_{ℓ-1}·d_ℓ + d_ℓ)`.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    pub fn param_index(&self) -> ParamIndex {
        let shapes = (1..=self.depth()).flat_map(|l| {
            let (fan_in, fan_out) = (self.layer_widths[l - 1], self.layer_widths[l]);
            [
                (Self::weight_name(l), vec![fan_out, fan_in]),
                (Self::bias_name(l), vec![fan_out]),
            ]
        });
        ParamIndex::from_shapes(shapes).expect("generated layout is contiguous")
    }

    /// Offset of `layer{ℓ}.weight`; the bias follows the weight directly.
    fn layer_offset(&self, layer: usize) -> usize {
        self.layer_widths[..layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layer_params<'a>(&self, params: &'a [f32], layer: usize) -> (&'a [f32], &'a [f32]) {
        let (fan_in, fan_out) = (self.layer_widths[layer - 1], self.layer_widths[layer]);
        let start = self.layer_offset(layer);
        let (w, rest) = params[start..].split_at(fan_in * fan_out);
        (w, &rest[..fan_out])
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        params.index().ensure_same(&self.param_index())
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Structural(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.depth() {
            return Err(Error::Domain(format!(
                "layer {layer} is outside 1..={}",
                self.depth()
            )));
        }
        Ok(())
    }
}

/// Applies layer `layer` to `input`, writing `f32` outputs into `out`.
fn apply_layer(spec: &ModelSpec, params: &[f32], layer: usize, input: &[f32], out: &mut Vec<f32>) {
    let (w, b) = spec.layer_params(params, layer);
    let fan_in = input.len();
    let hidden = layer < spec.depth();
    out.clear();
    out.extend(w.chunks_exact(fan_in).zip(b).map(|(row, &bias)| {
        let z = row
            .iter()
            .zip(input)
            .fold(bias as f64, |acc, (&wi, &xi)| acc + wi as f64 * xi as f64);
        if hidden {
            spec.activation.apply(z) as f32
        } else {
            z as f32
        }
    }));
}

/// All layer outputs `[x, h_1, …, h_L]` for one input.
fn forward_all(spec: &ModelSpec, params: &[f32], x: &[f32], upto: usize) -> Vec<Vec<f32>> {
    let mut outs = Vec::with_capacity(upto + 1);
    outs.push(x.to_vec());
    for layer in 1..=upto {
        let mut out = Vec::with_capacity(spec.width(layer));
        apply_layer(spec, params, layer, &outs[layer - 1], &mut out);
        outs.push(out);
    }
    outs
}

/// Deterministic initialization: weights `U(−1/√fan_in, 1/√fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for layer in 1..=spec.depth() {
        let (fan_in, fan_out) = (spec.width(layer - 1), spec.width(layer));
        let bound = 1.0 / (fan_in as f32).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(values, spec.param_index()).expect("initialized values are finite")
}

/// Logits `f(x; θ)`.
pub fn forward(spec: &ModelSpec, params: &ParamVector, x: &[f32]) -> Result<ActivationVector> {
    representation(spec, params, x, spec.depth())
}

/// `f^(ℓ)(x; θ)`, stopping the forward pass at layer `ℓ`.
pub fn representation(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &[f32],
    layer: usize,
) -> Result<ActivationVector> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    spec.check_layer(layer)?;
    Ok(representation_unchecked(spec, params.values(), x, layer))
}

/// Hot-path variant for callers that have already validated shapes.
pub(crate) fn representation_unchecked(
    spec: &ModelSpec,
    params: &[f32],
    x: &[f32],
    layer: usize,
) -> ActivationVector {
    let mut cur = x.to_vec();
    let mut next = Vec::new();
    for l in 1..=layer {
        apply_layer(spec, params, l, &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    ActivationVector::new(cur, layer)
}

/// Continues a forward pass from the stored output of layer `from`.
pub fn forward_from(
    spec: &ModelSpec,
    params: &ParamVector,
    from: &ActivationVector,
) -> Result<ActivationVector> {
    spec.check_params(params)?;
    if from.layer > spec.depth() || from.len() != spec.width(from.layer) {
        return Err(Error::Structural(format!(
            "activation of length {} does not fit layer {}",
            from.len(),
            from.layer
        )));
    }
    let mut cur = from.values.clone();
    let mut next = Vec::new();
    for l in from.layer + 1..=spec.depth() {
        apply_layer(spec, params.values(), l, &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(ActivationVector::new(cur, spec.depth()))
}

/// Per-layer representations of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationTrace {
    pub per_layer: BTreeMap<usize, ActivationVector>,
    pub sample_id: u64,
}

impl RepresentationTrace {
    pub fn with_sample_id(mut self, id: u64) -> Self {
        self.sample_id = id;
        self
    }

    pub fn layer(&self, layer: usize) -> Option<&ActivationVector> {
        self.per_layer.get(&layer)
    }
}

pub fn forward_traced(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &[f32],
    layers: &BTreeSet<usize>,
) -> Result<RepresentationTrace> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    for &l in layers {
        spec.check_layer(l)?;
    }
    let upto = layers.iter().next_back().copied().unwrap_or(0);
    let mut outs = forward_all(spec, params.values(), x, upto);
    let per_layer = layers
        .iter()
        .map(|&l| (l, ActivationVector::new(std::mem::take(&mut outs[l]), l)))
        .collect();
    Ok(RepresentationTrace {
        per_layer,
        sample_id: 0,
    })
}

/// Cross-entropy of `logits` against `label`, from a log-sum-exp in `f64`.
pub fn cross_entropy(logits: &[f32], label: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
    let lse = max
        + logits
            .iter()
            .map(|&z| (z as f64 - max).exp())
            .sum::<f64>()
            .ln();
    lse - logits[label] as f64
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Accumulates `scale · ∂CE/∂θ` for one sample into `grad` and returns the
/// sample loss with the predicted class. Shapes must already be validated.
pub(crate) fn accumulate_gradient(
    spec: &ModelSpec,
    params: &[f32],
    x: &[f32],
    label: usize,
    scale: f64,
    grad: &mut [f64],
) -> (f64, usize) {
    let depth = spec.depth();
    let outs = forward_all(spec, params, x, depth);
    let logits = &outs[depth];
    let loss = cross_entropy(logits, label);
    let predicted = argmax(logits);

    // dL/dz at the output: softmax(z) − onehot(y)
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z as f64));
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut delta: Vec<f64> = exps.iter().map(|e| e / total).collect();
    delta[label] -= 1.0;

    for layer in (1..=depth).rev() {
        let (fan_in, fan_out) = (spec.width(layer - 1), spec.width(layer));
        let w_off = spec.layer_offset(layer);
        let b_off = w_off + fan_in * fan_out;
        let input = &outs[layer - 1];
        for (j, &dj) in delta.iter().enumerate() {
            let row = &mut grad[w_off + j * fan_in..w_off + (j + 1) * fan_in];
            for (g, &a) in row.iter_mut().zip(input) {
                *g += scale * dj * a as f64;
            }
            grad[b_off + j] += scale * dj;
        }
        if layer > 1 {
            let w = &params[w_off..b_off];
            let mut prev = vec![0.0f64; fan_in];
            for (j, &dj) in delta.iter().enumerate() {
                for (p, &wjk) in prev.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                    *p += dj * wjk as f64;
                }
            }
            for (p, &h) in prev.iter_mut().zip(input) {
                *p *= spec.activation.derivative_from_output(h);
            }
            delta = prev;
        }
    }
    (loss, predicted)
}

/// Gradient of the cross-entropy loss of one sample.
pub fn backward(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &[f32],
    label: usize,
) -> Result<ParamVector> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    if label >= spec.num_classes() {
        return Err(Error::Domain(format!(
            "label {label} is outside 0..{}",
            spec.num_classes()
        )));
    }
    let mut grad = vec![0.0f64; params.len()];
    accumulate_gradient(spec, params.values(), x, label, 1.0, &mut grad);
    ParamVector::new(
        grad.into_iter().map(|g| g as f32).collect(),
        params.index().clone(),
    )
}
