use crate::diffcore::Tensor;
use crate::scalar::Scalar;

use super::{ActivationKind, MlpSpec, NetError};

/// Padded 2-D encoding of an [`MlpSpec`].
///
/// `n_max` rows and `(depth + 1) * n_max + depth` columns: one zero-padded
/// `n_max x n_max` block per weight matrix, column-concatenated, followed by
/// one activity column per hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpMatrix<S = f64> {
    depth: usize,
    n_max: usize,
    values: Tensor<S>,
}

/// What the matrix does not carry itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatrixMeta {
    pub activation: ActivationKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub depth: usize,
    pub n_max: usize,
}

impl MatrixMeta {
    pub fn cols(&self) -> usize {
        matrix_cols(self.depth, self.n_max)
    }
}

pub fn matrix_cols(depth: usize, n_max: usize) -> usize {
    (depth + 1) * n_max + depth
}

impl<S: Scalar> MlpMatrix<S> {
    pub fn from_tensor(depth: usize, n_max: usize, values: Tensor<S>) -> Result<Self, NetError> {
        let expected = [n_max, matrix_cols(depth, n_max)];
        if values.shape() != expected {
            return Err(NetError::Layout(format!(
                "matrix shape {:?}, expected {expected:?} for depth {depth}",
                values.shape()
            )));
        }
        Ok(Self { depth, n_max, values })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn rows(&self) -> usize {
        self.n_max
    }

    pub fn cols(&self) -> usize {
        matrix_cols(self.depth, self.n_max)
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.values
    }

    /// Column index of the activity column of hidden layer `layer`.
    pub fn mask_col(&self, layer: usize) -> usize {
        (self.depth + 1) * self.n_max + layer
    }
}

/// Encodes `spec` into the padded block layout.
pub fn to_matrix<S: Scalar>(spec: &MlpSpec<S>, l_max: usize, n_max: usize) -> Result<MlpMatrix<S>, NetError> {
    let depth = spec.depth();
    if depth == 0 || depth > l_max {
        return Err(NetError::Depth { depth, max: l_max });
    }
    for width in [spec.input_dim(), spec.output_dim(), spec.n_max()] {
        if width > n_max {
            return Err(NetError::TooWide { width, n_max });
        }
    }
    let cols = matrix_cols(depth, n_max);
    let mut values = Tensor::zeros(&[n_max, cols]);
    let data = values.data_mut();
    for (k, w) in spec.weights().iter().enumerate() {
        let (r, c) = (w.shape()[0], w.shape()[1]);
        for a in 0..r {
            for b in 0..c {
                data[a * cols + k * n_max + b] = w.data()[a * c + b];
            }
        }
    }
    for (j, mask) in spec.masks().iter().enumerate() {
        let col = (depth + 1) * n_max + j;
        for (slot, &v) in mask.iter().enumerate() {
            data[slot * cols + col] = v;
        }
    }
    MlpMatrix::from_tensor(depth, n_max, values)
}

/// Decodes a matrix whose activity columns already passed through a sigmoid.
///
/// With `soft = false` a neuron is active iff its activity value is strictly
/// greater than 0.5; with `soft = true` the values are kept as continuous
/// gates. Either way the weights are then masked by the gates.
pub fn from_matrix<S: Scalar>(m: &MlpMatrix<S>, meta: MatrixMeta, soft: bool) -> Result<MlpSpec<S>, NetError> {
    if m.depth != meta.depth || m.n_max != meta.n_max {
        return Err(NetError::Layout(format!(
            "matrix is depth {} / n_max {}, meta says {} / {}",
            m.depth, m.n_max, meta.depth, meta.n_max
        )));
    }
    if meta.input_dim > meta.n_max || meta.output_dim > meta.n_max {
        return Err(NetError::TooWide {
            width: meta.input_dim.max(meta.output_dim),
            n_max: meta.n_max,
        });
    }
    let (depth, n_max) = (meta.depth, meta.n_max);
    let cols = m.cols();
    let data = m.values.data();
    let weights = (0..=depth)
        .map(|k| {
            let [r, c] = super::layer_shape(k, depth, meta.input_dim, meta.output_dim, n_max);
            let mut w = Vec::with_capacity(r * c);
            for a in 0..r {
                for b in 0..c {
                    w.push(data[a * cols + k * n_max + b]);
                }
            }
            Tensor::from_shape_vec(&[r, c], w)
        })
        .collect();
    let half = S::lit(0.5);
    let masks = (0..depth)
        .map(|j| {
            let col = m.mask_col(j);
            (0..n_max)
                .map(|slot| {
                    let v = data[slot * cols + col];
                    if soft {
                        v
                    } else if v > half {
                        S::one()
                    } else {
                        S::zero()
                    }
                })
                .collect()
        })
        .collect();
    let spec = MlpSpec::new(meta.activation, meta.input_dim, meta.output_dim, n_max, masks, weights)?;
    Ok(spec.apply_mask())
}
