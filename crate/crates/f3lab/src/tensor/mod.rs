//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! `Tensor` is the plain value type used throughout the crate; gradients are
//! obtained by recording operations on a [`Tape`] and running a single
//! backward pass. Every operation validates shapes and rejects non-finite
//! outputs instead of letting NaN/Inf propagate.

mod check;
mod tape;

pub use check::{grad_check, numerical_grad};
pub use tape::{Tape, Var};

use thiserror::Error;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("gradient requested for a leaf that does not require gradients")]
    DetachedLeaf,
    #[error("kl_terms domain error: q <= 0 where p > 0 (index {index})")]
    KlDomain { index: usize },
    #[error("normalize over a zero-sum tensor")]
    ZeroSum,
    #[error("cross-entropy target {target} out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major n-dimensional array of 64-bit floats.
///
/// `grad` is populated on requires-grad leaves after `Tape::backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating that the shape is positive and matches the data length.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                detail: format!("shape {shape:?} implies {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: positive shape required")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(&[1], vec![v]).expect("scalar")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect()).expect("from_fn: positive shape required")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New tensor with each element mapped through `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
            grad: None,
        })
    }

    /// Clamp all elements into [0, 1]; used for pixel-valued tensors.
    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Max-norm of the elementwise difference.
    pub fn linf_dist(&self, other: &Tensor) -> Result<f64> {
        Ok(self
            .zip(other, |a, b| (a - b).abs())?
            .data
            .iter()
            .copied()
            .fold(0.0, f64::max))
    }

    /// Sum of absolute elementwise differences.
    pub fn l1_dist(&self, other: &Tensor) -> Result<f64> {
        Ok(self.zip(other, |a, b| (a - b).abs())?.data.iter().sum())
    }

    pub(crate) fn replace_data(&mut self, data: Vec<f64>) {
        debug_assert_eq!(data.len(), self.data.len());
        self.data = data;
    }
}

/// sign with sign(0) = 0, the convention used by every sign-step in the crate.
pub fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn signum0_at_zero() {
        assert_eq!(signum0(0.0), 0.0);
        assert_eq!(signum0(-2.0), -1.0);
        assert_eq!(signum0(5.0), 1.0);
    }

    #[test]
    fn linf_and_l1_distances() {
        let a = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(&[3], vec![0.0, 2.5, 3.0]).unwrap();
        assert_eq!(a.linf_dist(&b).unwrap(), 1.0);
        assert_eq!(a.l1_dist(&b).unwrap(), 1.5);
    }
}
