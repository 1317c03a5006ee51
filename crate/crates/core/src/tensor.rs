use std::fmt;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

/// Dense n-dimensional array of 64-bit reals, row-major.
///
/// Tensors are immutable once constructed and cheap to clone (the storage
/// is shared). Construction rejects non-finite values, so every tensor in
/// the system holds finite data.
#[derive(Clone)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that `data.len() == product(dims)` and
    /// every value is finite.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = dims.iter().product();
        if data.len() != numel {
            return Err(shape_err!(
                "data length {} does not match dims {:?} (numel {})",
                data.len(),
                dims,
                numel
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {bad} rejected at tensor construction"
            )));
        }
        Ok(Tensor {
            dims,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for op outputs whose inputs are already known
    /// finite; still guarded in debug builds.
    pub(crate) fn from_op(dims: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        debug_assert!(data.iter().all(|v| v.is_finite()), "op produced non-finite value");
        Tensor {
            dims,
            data: Arc::new(data),
        }
    }

    pub fn zeros(dims: Vec<usize>) -> Tensor {
        let numel = dims.iter().product();
        Tensor {
            data: Arc::new(vec![0.0; numel]),
            dims,
        }
    }

    pub fn full(dims: Vec<usize>, value: f64) -> Result<Tensor> {
        let numel = dims.iter().product();
        Tensor::new(dims, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(shape_err!("item() on tensor with dims {:?}", self.dims));
        }
        Ok(self.data[0])
    }

    /// Same storage viewed under new dims; numel must be preserved.
    pub fn reshaped(&self, dims: Vec<usize>) -> Result<Tensor> {
        let numel: usize = dims.iter().product();
        if numel != self.numel() {
            return Err(shape_err!(
                "cannot reshape {:?} (numel {}) to {:?} (numel {})",
                self.dims,
                self.numel(),
                dims,
                numel
            ));
        }
        Ok(Tensor {
            dims,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_op(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise sum of two tensors with identical dims.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(shape_err!(
                "add dims mismatch: {:?} vs {:?}",
                self.dims,
                other.dims
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(self.dims.clone(), data))
    }

    /// True iff dims match and every element compares equal bit-for-bit.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; dims must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(shape_err!(
                "diff dims mismatch: {:?} vs {:?}",
                self.dims,
                other.dims
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.numel() <= 8 {
            write!(f, "Tensor{:?} {:?}", self.dims, &self.data[..])
        } else {
            write!(f, "Tensor{:?} ({} values)", self.dims, self.numel())
        }
    }
}
