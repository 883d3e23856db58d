//! Dense row-major tensors with an optional gradient buffer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense tensor of `f64` values with a lazily allocated gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl GradTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; len], grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::ShapeMismatch { axis: "elements", expected: len, found: values.len() });
        }
        Ok(Self { shape: shape.to_vec(), values, grad: None })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), values: vec![value], grad: None }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let len = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::ShapeMismatch { axis: "gradient", expected: self.values.len(), found: delta.len() });
        }
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Same values under a new shape with the same element count. Drops the gradient.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.values.len() {
            return Err(Error::ShapeMismatch { axis: "elements", expected: self.values.len(), found: len });
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Debug builds log non-finite outputs; overflow during divergent training
    /// is reported by the trainer instead of aborting here.
    #[inline]
    pub(crate) fn debug_check_finite(&self, op: &str) {
        if cfg!(debug_assertions) && !self.all_finite() {
            log::error!("{op}: non-finite value in output");
        }
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Rank { op, expected: rank, found: self.rank() });
        }
        Ok(())
    }
}
