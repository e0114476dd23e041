//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Covers exactly the operations the enhancement network needs: strided and
//! transposed 1-D convolution, GLU, LSTM building blocks, global average
//! pooling, pointwise arithmetic with limited broadcasting, framing and
//! spectral helpers, and full reductions. Values are stored as `f32`;
//! reductions accumulate in `f64`, and the tape supports an `f64` shadow
//! re-evaluation used by the finite-difference gradient checks.

mod graph;
mod kernels;
mod lstm;

pub mod gradcheck;

pub use graph::{Graph, Var};
pub use lstm::{bilstm_forward, BiLstmVars, LstmDirectionVars, LstmLayerVars};

use crate::error::{Result, RoseError};

/// Shape of a tensor, rank 1..=3, row-major storage.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 3],
    rank: u8,
}

impl Shape {
    pub fn r1(n: usize) -> Self {
        Shape { dims: [n, 1, 1], rank: 1 }
    }

    pub fn r2(rows: usize, cols: usize) -> Self {
        Shape { dims: [rows, cols, 1], rank: 2 }
    }

    pub fn r3(a: usize, b: usize, c: usize) -> Self {
        Shape { dims: [a, b, c], rank: 3 }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// True for the 1-element rank-1 shape used for loss scalars.
    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.rank == 1
    }
}

impl std::fmt::Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// Dense rank-<=3 tensor of `f32` values, row-major.
///
/// This is the plain value type: model weights, audio buffers and feature
/// matrices live here. Gradient bookkeeping happens on the [`Graph`] tape,
/// where each node pairs one of these values with an optional accumulator.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(RoseError::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: Shape::r1(1), data: vec![v] }
    }

    pub fn from_slice1(data: &[f32]) -> Self {
        Tensor { shape: Shape::r1(data.len()), data: data.to_vec() }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(Shape::r2(rows, cols), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.shape.rank(), 2);
        self.data[row * self.shape.dims[1] + col]
    }

    /// Element of a rank-3 tensor.
    pub fn at3(&self, a: usize, b: usize, c: usize) -> f32 {
        debug_assert_eq!(self.shape.rank(), 3);
        let d = self.shape.dims;
        self.data[(a * d[1] + b) * d[2] + c]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.numel())
        }
    }
}
