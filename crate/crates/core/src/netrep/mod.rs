//! Sparse MLPs: the domain model, forward evaluation, masking and pruning.
//!
//! Every hidden layer owns `n_max` neuron slots; a per-slot mask marks which
//! neurons exist. Weight matrices always span the full slot range, so
//! `W_0` is `input_dim x n_max`, the middle ones are `n_max x n_max` and the
//! last is `n_max x output_dim`. Entry `(a, b)` of `W_k` connects neuron `a`
//! of layer `k` to neuron `b` of layer `k + 1`. There are no biases.

mod matrix;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{logistic, Tensor, LEAKY_SLOPE};
use crate::scalar::{gemm, Scalar};

pub use matrix::{from_matrix, matrix_cols, to_matrix, MatrixMeta, MlpMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("input has length {found}, network expects {expected}")]
    InputLength { expected: usize, found: usize },
    #[error("weight matrix {layer} has shape {found:?}, expected {expected:?}")]
    WeightShape {
        layer: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("mask of hidden layer {layer} has {found} slots, expected {expected}")]
    MaskLength {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("mask of hidden layer {layer} holds {value}, outside [0, 1]")]
    MaskValue { layer: usize, value: f64 },
    #[error("network depth {depth} outside 1..={max}")]
    Depth { depth: usize, max: usize },
    #[error("layer of width {width} exceeds n_max = {n_max}")]
    TooWide { width: usize, n_max: usize },
    #[error("matrix layout: {0}")]
    Layout(String),
    #[error("dimension must be positive: {0}")]
    ZeroDim(&'static str),
}

/// Activation family of a network.
///
/// Sigmoid-based nets use sigmoid hidden units and a linear output layer;
/// leaky-ReLU-based and linear-based nets squash the output with a sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Sigmoid,
    LeakyRelu,
    Linear,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [Self::Sigmoid, Self::LeakyRelu, Self::Linear];

    pub fn hidden<S: Scalar>(self, x: S) -> S {
        match self {
            Self::Sigmoid => logistic(x),
            Self::LeakyRelu => {
                if x > S::zero() {
                    x
                } else {
                    x * S::lit(LEAKY_SLOPE)
                }
            }
            Self::Linear => x,
        }
    }

    pub fn output<S: Scalar>(self, x: S) -> S {
        match self {
            Self::Sigmoid => x,
            Self::LeakyRelu | Self::Linear => logistic(x),
        }
    }

    /// Whether the output layer applies a sigmoid.
    pub fn squashes_output(self) -> bool {
        !matches!(self, Self::Sigmoid)
    }

    /// Half-width of the uniform weight range used by the generator.
    pub fn weight_range(self) -> f64 {
        match self {
            Self::Sigmoid => 10.0,
            Self::LeakyRelu | Self::Linear => 3.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sigmoid => "sigmoid",
            Self::LeakyRelu => "leaky-relu",
            Self::Linear => "linear",
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "leaky-relu" | "leaky_relu" | "leakyrelu" => Ok(Self::LeakyRelu),
            "linear" => Ok(Self::Linear),
            other => Err(format!(
                "unknown activation '{other}' (expected sigmoid, leaky-relu or linear)"
            )),
        }
    }
}

/// One sparse MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec<S = f64> {
    activation: ActivationKind,
    input_dim: usize,
    output_dim: usize,
    n_max: usize,
    /// Per hidden layer, one value per slot in `[0, 1]`. Hard masks hold
    /// exactly 0 or 1; soft (decoded, differentiable) masks act as gates.
    masks: Vec<Vec<S>>,
    weights: Vec<Tensor<S>>,
}

impl<S: Scalar> MlpSpec<S> {
    pub fn new(
        activation: ActivationKind,
        input_dim: usize,
        output_dim: usize,
        n_max: usize,
        masks: Vec<Vec<S>>,
        weights: Vec<Tensor<S>>,
    ) -> Result<Self, NetError> {
        if input_dim == 0 {
            return Err(NetError::ZeroDim("input_dim"));
        }
        if output_dim == 0 {
            return Err(NetError::ZeroDim("output_dim"));
        }
        if n_max == 0 {
            return Err(NetError::ZeroDim("n_max"));
        }
        if masks.is_empty() {
            return Err(NetError::Depth { depth: 0, max: usize::MAX });
        }
        for (layer, m) in masks.iter().enumerate() {
            if m.len() != n_max {
                return Err(NetError::MaskLength {
                    layer,
                    expected: n_max,
                    found: m.len(),
                });
            }
            if let Some(v) = m.iter().find(|v| !(**v >= S::zero() && **v <= S::one())) {
                return Err(NetError::MaskValue {
                    layer,
                    value: v.to_f64_lossy(),
                });
            }
        }
        let depth = masks.len();
        if weights.len() != depth + 1 {
            return Err(NetError::Layout(format!(
                "{} weight matrices for {depth} hidden layers",
                weights.len()
            )));
        }
        for (layer, w) in weights.iter().enumerate() {
            let expected = layer_shape(layer, depth, input_dim, output_dim, n_max);
            if w.shape() != expected {
                return Err(NetError::WeightShape {
                    layer,
                    expected: expected.to_vec(),
                    found: w.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            activation,
            input_dim,
            output_dim,
            n_max,
            masks,
            weights,
        })
    }

    /// All-zero network whose hidden layer `k` has its first `sizes[k]` slots active.
    pub fn zeros(
        activation: ActivationKind,
        input_dim: usize,
        output_dim: usize,
        n_max: usize,
        hidden_sizes: &[usize],
    ) -> Result<Self, NetError> {
        if let Some(&width) = hidden_sizes.iter().find(|&&h| h > n_max) {
            return Err(NetError::TooWide { width, n_max });
        }
        let depth = hidden_sizes.len();
        let masks = hidden_sizes
            .iter()
            .map(|&h| (0..n_max).map(|j| if j < h { S::one() } else { S::zero() }).collect())
            .collect();
        let weights = (0..=depth)
            .map(|k| Tensor::zeros(&layer_shape(k, depth, input_dim, output_dim, n_max)))
            .collect();
        Self::new(activation, input_dim, output_dim, n_max, masks, weights)
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[Vec<S>] {
        &self.masks
    }

    pub fn weights(&self) -> &[Tensor<S>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.weights
    }

    pub fn set_mask(&mut self, layer: usize, slot: usize, active: bool) {
        self.masks[layer][slot] = if active { S::one() } else { S::zero() };
    }

    /// Active neurons per hidden layer (mask value above one half).
    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.masks
            .iter()
            .map(|m| m.iter().filter(|&&v| v > S::lit(0.5)).count())
            .collect()
    }

    /// True when every mask value is exactly 0 or 1.
    pub fn has_hard_masks(&self) -> bool {
        self.masks
            .iter()
            .flatten()
            .all(|&v| v == S::zero() || v == S::one())
    }

    /// Gate of every neuron in layer `layer` (0 = input, depth + 1 = output).
    fn gate(&self, layer: usize, slot: usize) -> S {
        if layer == 0 || layer == self.depth() + 1 {
            S::one()
        } else {
            self.masks[layer - 1][slot]
        }
    }

    /// Forward pass on one input vector.
    pub fn forward(&self, x: &[S]) -> Result<Vec<S>, NetError> {
        if x.len() != self.input_dim {
            return Err(NetError::InputLength {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        let out = self.forward_batch(&Tensor::from_shape_vec(&[1, x.len()], x.to_vec()))?;
        Ok(out.into_data())
    }

    /// Output-layer pre-activations for a batch `[rows, input_dim]`.
    pub fn pre_output_batch(&self, xs: &Tensor<S>) -> Result<Tensor<S>, NetError> {
        if xs.rank() != 2 || xs.shape()[1] != self.input_dim {
            return Err(NetError::InputLength {
                expected: self.input_dim,
                found: xs.shape().last().copied().unwrap_or(0),
            });
        }
        let rows = xs.shape()[0];
        let mut h = xs.data().to_vec();
        let mut width = self.input_dim;
        let depth = self.depth();
        for (k, w) in self.weights.iter().enumerate() {
            let out_w = w.shape()[1];
            let mut a = vec![S::zero(); rows * out_w];
            gemm(false, false, rows, out_w, width, S::one(), &h, w.data(), S::zero(), &mut a);
            if k < depth {
                let mask = &self.masks[k];
                for row in a.chunks_exact_mut(out_w) {
                    for (v, &g) in row.iter_mut().zip(mask) {
                        *v = self.activation.hidden(*v) * g;
                    }
                }
            }
            h = a;
            width = out_w;
        }
        Ok(Tensor::from_shape_vec(&[rows, width], h))
    }

    /// Forward pass on a batch `[rows, input_dim]` -> `[rows, output_dim]`.
    pub fn forward_batch(&self, xs: &Tensor<S>) -> Result<Tensor<S>, NetError> {
        let pre = self.pre_output_batch(xs)?;
        Ok(pre.map(|v| self.activation.output(v)))
    }

    /// Scales every weight by the gates of the two neurons it connects.
    ///
    /// With hard masks this zeroes all weights touching an inactive neuron
    /// and is idempotent.
    pub fn apply_mask(&self) -> Self {
        let mut out = self.clone();
        for (k, w) in out.weights.iter_mut().enumerate() {
            let cols = w.shape()[1];
            for (idx, v) in w.data_mut().iter_mut().enumerate() {
                let (a, b) = (idx / cols, idx % cols);
                let g = self.gate(k, a) * self.gate(k + 1, b);
                if g == S::zero() {
                    *v = S::zero();
                } else if g != S::one() {
                    *v = *v * g;
                }
            }
        }
        out
    }

    /// Number of weights that are exactly non-zero.
    pub fn non_zero_count(&self) -> usize {
        self.weights
            .iter()
            .flat_map(|w| w.data())
            .filter(|&&v| v != S::zero())
            .count()
    }

    /// Zeroes every weight with `|w| < threshold`, then applies the mask.
    pub fn prune(&self, threshold: S) -> Self {
        assert!(threshold >= S::zero(), "prune threshold must be non-negative");
        let mut out = self.clone();
        for w in &mut out.weights {
            for v in w.data_mut() {
                if v.abs() < threshold {
                    *v = S::zero();
                }
            }
        }
        out.apply_mask()
    }

    /// Thresholds soft masks at one half (strictly greater means active).
    pub fn harden(&self) -> Self {
        let mut out = self.clone();
        for m in &mut out.masks {
            for v in m.iter_mut() {
                *v = if *v > S::lit(0.5) { S::one() } else { S::zero() };
            }
        }
        out
    }

    /// Every `(layer, from, to)` link with a non-zero weight.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.weights.iter().enumerate().flat_map(|(k, w)| {
            let cols = w.shape()[1];
            w.data()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != S::zero())
                .map(move |(idx, _)| (k, idx / cols, idx % cols))
        })
    }

    /// Whether every input reaches some output through non-zero weights
    /// and active neurons.
    pub fn inputs_reach_output(&self) -> bool {
        let depth = self.depth();
        (0..self.input_dim).all(|input| {
            let mut frontier = vec![false; self.input_dim];
            frontier[input] = true;
            for (k, w) in self.weights.iter().enumerate() {
                let cols = w.shape()[1];
                let mut next = vec![false; cols];
                for (a, &on) in frontier.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for (b, slot) in next.iter_mut().enumerate() {
                        let active = k == depth || self.masks[k][b] > S::lit(0.5);
                        if active && w.data()[a * cols + b] != S::zero() {
                            *slot = true;
                        }
                    }
                }
                frontier = next;
            }
            frontier.iter().any(|&v| v)
        })
    }

    pub fn cast<T: Scalar>(&self) -> MlpSpec<T> {
        MlpSpec {
            activation: self.activation,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            n_max: self.n_max,
            masks: self
                .masks
                .iter()
                .map(|m| m.iter().map(|v| T::lit(v.to_f64_lossy())).collect())
                .collect(),
            weights: self.weights.iter().map(|w| w.cast()).collect(),
        }
    }
}

/// Shape of weight matrix `k` in a network with `depth` hidden layers.
pub fn layer_shape(k: usize, depth: usize, input_dim: usize, output_dim: usize, n_max: usize) -> [usize; 2] {
    let rows = if k == 0 { input_dim } else { n_max };
    let cols = if k == depth { output_dim } else { n_max };
    [rows, cols]
}

#[cfg(test)]
mod tests;
