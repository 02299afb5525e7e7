//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a value-semantic row-major array of f64 with an optional
//! gradient buffer. Computation is recorded on a [`Tape`]; the backward pass
//! is built as additional tape nodes, so gradients are themselves
//! differentiable (needed to train through an unrolled extraction loop).

mod gradcheck;
mod ops;
mod tape;

#[cfg(test)]
mod tests;

pub use gradcheck::{finite_diff_gradient, grad_check, max_rel_err, op_sweep};
pub use tape::{ConvGeom, NodeId, Op, Reduction, Tape};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Zero (or allocate) the gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    /// Accumulate a gradient contribution.
    pub fn add_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.values.len());
        let buf = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
