//! Dense tensors, a fixed operator set and reverse-mode differentiation.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, Coordinate, Evaluation, GradCheckOptions, GradCheckReport};
pub use ops::{argmax, cross_entropy, logsumexp, matmul, softmax, top_k, Activation};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Replaces the value, keeping the shape.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.name,
                self.value.shape(),
                value.shape()
            ));
        }
        self.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
