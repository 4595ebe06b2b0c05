use crate::error::{Error, Result};

/// A named, row-major matrix of 32-bit floats.
///
/// All values are finite by construction; constructors reject NaN and
/// infinities so downstream arithmetic never has to re-check.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if data.len() != rows * cols {
            return Err(Error::Validation {
                tensor: name,
                msg: format!(
                    "data length {} does not match shape {rows}x{cols}",
                    data.len()
                ),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                tensor: name,
                msg: format!("non-finite value at flat index {pos}"),
            });
        }
        Ok(Self {
            name,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    /// Sample mean of all entries, accumulated in f64.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        sum / self.data.len() as f64
    }

    /// Population variance of all entries, accumulated in f64.
    pub fn variance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mean = self.mean();
        let sum_sq: f64 = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum();
        sum_sq / self.data.len() as f64
    }
}
