//! Dense row-major tensors and the reverse-mode tape that differentiates
//! programs built from them.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{numeric_gradient, relative_error};
pub use ops::{ConvGeometry, PoolKind};
pub use tape::{BatchMoments, BatchNormStats, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// N-dimensional array in row-major (N, C, H, W) order with an optional
/// gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Installs a gradient; its length must match the value count.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient has {} values for shape {:?}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Converts element type, dropping any gradient.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("shape {:?} differs from {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, data)
    }
}
