//! Dense row-major arrays and a tape-based reverse-mode engine.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, OpKind, Reduction, Var};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};

/// An N-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(dim_err!("dims must be positive, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "dims {dims:?} hold {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// The `n x n` identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.iter().any(|&d| d == 0) {
            return Err(dim_err!("cannot reshape {:?} to {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at a `[c, y, x]` position of a rank-3 tensor.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 3);
        self.data[(c * self.dims[1] + y) * self.dims[2] + x]
    }

    /// Reverses the last axis (horizontal flip for `[C, H, W]`).
    pub fn flip_last_axis(&self) -> Self {
        let w = *self.dims.last().expect("tensor has at least one axis");
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Self {
            dims: self.dims.clone(),
            data,
        }
    }
}
