//! Minimal reverse-mode differentiable tensor core.
//!
//! Values are dense row-major `f64` buffers. Operations are recorded on a
//! [`Tape`]; [`Tape::backward`] walks the tape in reverse and returns the
//! gradients of every leaf that requires them. Model parameters live in a
//! [`ParamStore`] and are brought onto a tape as leaves for each step.
//!
//! Broadcasting for the binary element-wise ops (`add`, `mul`) is restricted
//! to one rule: the right operand's shape must equal the left operand's shape
//! or a trailing suffix of it, and it is repeated across the leading
//! dimensions. The output always has the left operand's shape.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod tape;

pub use optim::{AdamW, AdamWConfig, Param, ParamId, ParamStore, ParameterGroup};
pub use tape::{AttentionLayout, Gradients, Segment, Tape, Var};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect()).expect("from_fn: valid shape")
    }

    pub fn with_requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, yes: bool) {
        self.requires_grad = yes;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Resets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += x;
        }
        Ok(())
    }
}
