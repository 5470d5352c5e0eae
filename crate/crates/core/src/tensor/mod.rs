//! Dense row-major f64 tensors and the reverse-mode tape built on them.

mod kernels;
mod tape;

pub use kernels::{argmax, log_softmax, logsumexp, softmax};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// An n-dimensional array of f64 in row-major order.
///
/// A rank-0 tensor (empty shape) holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dimension sizes must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// A 1×n row.
    pub fn row(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![1, values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { shape: vec![n, n], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. The shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row_slice on scalar");
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
