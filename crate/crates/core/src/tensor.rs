//! Dense row-major `f64` tensors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_argument, shape_mismatch, Result};

/// A dense multi-dimensional value array with an optional gradient slot.
///
/// Invariants: `data.len() == shape.iter().product()`, and `grad`, when
/// present, has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_mismatch(
                "Tensor::new",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid_argument(
                "Tensor::new",
                format!("zero-sized dimension in shape {shape:?}"),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// A tensor is scalar when it holds exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(invalid_argument(
                "Tensor::scalar_value",
                format!("tensor of shape {:?} is not scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy channel `c` of a `[C, H, W]` tensor into a `[1, H, W]` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(shape_mismatch(
                "Tensor::channel",
                format!("expected [C,H,W], got {:?}", self.shape),
            ));
        }
        let (ch, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if c >= ch {
            return Err(invalid_argument(
                "Tensor::channel",
                format!("channel {c} out of {ch}"),
            ));
        }
        let plane = h * w;
        let data = self.data[c * plane..(c + 1) * plane].to_vec();
        Tensor::new(vec![1, h, w], data)
    }

    /// Ensure the grad slot exists (zero-filled) and return it mutably.
    pub(crate) fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }
}
