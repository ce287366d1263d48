//! Dense-tensor math with reverse-mode automatic differentiation.
//!
//! Everything is `f32`, row-major, CPU-only. The [`Tape`](tape::Tape) records
//! forward operations and replays them in reverse for gradients; plain value
//! kernels live in [`kernels`] so the same arithmetic backs both the taped and
//! the tape-free (evaluation) paths. Results are deterministic for a fixed
//! seed: internal parallelism only splits work across disjoint output regions
//! and reductions always run in index order.

pub mod functional;
pub mod kernels;
pub mod optim;
pub mod tape;

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from shape and data; the data length must equal the
    /// product of the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        if data.len() != numel {
            return Err(Error::shape(
                "Tensor::new",
                format!("{numel} values for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "Tensor::item",
                "1 element",
                format!("{}", self.numel()),
            ));
        }
        Ok(self.data[0])
    }

    /// Reinterpret as a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!("{} elements", self.data.len()),
                format!("shape {shape:?} = {numel}"),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Error out if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::non_finite(
                    context,
                    format!("element {i} of {:?} is {v}", self.shape),
                ));
            }
        }
        Ok(())
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::max_abs_diff",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Dense integer tensor; holds quantized codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i64>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "IntTensor::new",
                format!("{numel} values for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(IntTensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }
}
