//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations as they are evaluated; calling
//! [`Tape::backward`] sweeps the record once in reverse and returns the
//! gradient of one output wrt every node. The primitive set is deliberately
//! small: elementwise arithmetic, matrix products, same-padded 2-D
//! convolutions (plain and transposed), sigmoid, leaky-ReLU, absolute
//! value, real powers, sums, a minimum over scalars, and the shape ops
//! (reshape, concat, narrow/split).
//!
//! ```
//! use funcspace::diffcore::{forward, Tensor};
//!
//! let rec = forward(&[Tensor::scalar(3.0_f64)], |tape, x| tape.mul(x[0], x[0])).unwrap();
//! assert_eq!(rec.output_value().item(), 9.0);
//! let grads = rec.backward_scalar().unwrap();
//! assert_eq!(grads.get(rec.inputs[0]).unwrap().item(), 6.0);
//! ```

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

use crate::scalar::Scalar;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, GradCheckReport};
pub use tape::{logistic, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default negative slope of the leaky-ReLU activation.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },
    #[error("shape mismatch at node {node}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        node: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

/// A finished forward pass: the tape, the leaf handles of the inputs and
/// the output node.
pub struct Recording<S> {
    pub tape: Tape<S>,
    pub inputs: Vec<Var>,
    pub output: Var,
}

impl<S: Scalar> Recording<S> {
    pub fn output_value(&self) -> &Tensor<S> {
        self.tape.value(self.output)
    }

    pub fn backward(&self, seed: &Tensor<S>) -> Result<Gradients<S>, DiffError> {
        self.tape.backward(self.output, seed)
    }

    /// Backward pass for a scalar output, seeded with 1.
    pub fn backward_scalar(&self) -> Result<Gradients<S>, DiffError> {
        let seed = Tensor::full(self.tape.shape(self.output), S::one());
        self.backward(&seed)
    }

    /// Gradient wrt each input, in input order.
    pub fn input_gradients(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.inputs.iter().map(|&v| grads.wrt(&self.tape, v)).collect()
    }
}

/// Records `build` applied to differentiable copies of `inputs`.
///
/// Fails with the id of the first node that produced NaN or Inf.
pub fn forward<S, F>(inputs: &[Tensor<S>], build: F) -> Result<Recording<S>, DiffError>
where
    S: Scalar,
    F: FnOnce(&mut Tape<S>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let output = build(&mut tape, &vars);
    tape.check_finite()?;
    Ok(Recording {
        tape,
        inputs: vars,
        output,
    })
}

/// Backward pass of a recording with an explicit seed.
pub fn backward<S: Scalar>(rec: &Recording<S>, seed: &Tensor<S>) -> Result<Vec<Tensor<S>>, DiffError> {
    let grads = rec.backward(seed)?;
    Ok(rec.input_gradients(&grads))
}

#[cfg(test)]
mod tests;
