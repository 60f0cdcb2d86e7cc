//! Dense row-major tensors over `f32` or `f64`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Scalar type for tensor arithmetic. Training runs in `f32`, oracle and
/// gradient tests in `f64`.
pub trait Real:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + 'static
{
    /// Convert from an `f64` constant.
    fn of(v: f64) -> Self;
    /// Widen to `f64`.
    fn to64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to64(self) -> f64 {
        self
    }
}

/// Errors reported by tensor primitives and the tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TensorError {
    /// Operand shapes do not satisfy the primitive's contract.
    ShapeMismatch { op: &'static str, detail: String },
    /// A primitive produced NaN or Inf.
    NonFinite { op: &'static str },
    /// A softmax row was fully masked.
    EmptyRow { row: usize },
    /// `backward` was asked to differentiate a non-scalar.
    NotScalar,
    /// A finite-difference probe evaluated to NaN or Inf.
    NonFiniteProbe,
    /// Invalid argument outside of shape mismatches (bad index, empty input).
    InvalidArgument { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            TensorError::EmptyRow { row } => write!(f, "softmax row {row} is fully masked"),
            TensorError::NotScalar => write!(f, "backward requires a scalar loss"),
            TensorError::NonFiniteProbe => write!(f, "finite-difference probe was non-finite"),
            TensorError::InvalidArgument { op, detail } => {
                write!(f, "invalid argument to {op}: {detail}")
            }
        }
    }
}

impl core::error::Error for TensorError {}

/// A dense tensor: shape plus row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    /// Build a tensor, checking that the shape matches the data length.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: alloc::format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n], requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false }
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Convenience constructor from `f64` literals.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Mark the tensor as a differentiable input when fed to a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Clear the differentiable-input mark.
    pub fn detached(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Width of the last dimension; rows are every leading dimension flattened.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn n_rows(&self) -> usize {
        let c = self.last_dim();
        if c == 0 {
            0
        } else {
            self.numel() / c
        }
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Cast element type (used to move f64 features into an f32 network).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.to64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}
