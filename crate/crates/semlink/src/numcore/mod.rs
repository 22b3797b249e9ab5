//! Reverse-mode automatic differentiation over real and complex tensors.
//!
//! The engine is a Wengert tape: every forward op appends a node holding its
//! output values and enough context to replay the chain rule in reverse.
//! Tapes are rebuilt each forward pass and confined to one thread; detached
//! [`Tensor`] values are plain data and move freely between threads.
//!
//! Complex gradients use the real-pair convention: for a real scalar loss,
//! the gradient of a complex entry x + jy is stored as the packed pair
//! (dL/dx, dL/dy). All trainable parameters in the pipeline are real (phases,
//! weights), so this convention is exact end to end.

mod adam;
mod graph;
pub mod gradcheck;
pub mod linalg;

pub use adam::{adam_step, clip_global_norm, AdamHyper, AdamState, Binding, ParamStore};
pub use graph::{Grads, Graph, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Real,
    Complex,
}

impl Dtype {
    /// Storage slots per logical element.
    pub fn width(self) -> usize {
        match self {
            Dtype::Real => 1,
            Dtype::Complex => 2,
        }
    }
}

/// A shape-carrying numeric array. Complex entries are stored as interleaved
/// (re, im) pairs in `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize], dtype: Dtype) -> Self {
        let n: usize = shape.iter().product::<usize>() * dtype.width();
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data: vec![0.0; n],
        }
    }

    pub fn from_real(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "real tensor data length must match shape"
        );
        Tensor {
            shape: shape.to_vec(),
            dtype: Dtype::Real,
            data,
        }
    }

    /// Complex tensor from interleaved (re, im) data.
    pub fn from_complex(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            2 * shape.iter().product::<usize>(),
            data.len(),
            "complex tensor data length must be twice the element count"
        );
        Tensor {
            shape: shape.to_vec(),
            dtype: Dtype::Complex,
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_real(&[1], vec![x])
    }

    /// Identity matrix, complex dtype.
    pub fn eye_complex(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n], Dtype::Complex);
        for i in 0..n {
            t.data[2 * (i * n + i)] = 1.0;
        }
        t
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    /// Complex entry at flat element index.
    pub fn c_at(&self, i: usize) -> (f64, f64) {
        debug_assert_eq!(self.dtype, Dtype::Complex);
        (self.data[2 * i], self.data[2 * i + 1])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Squared Frobenius norm (sum of squared slots; for complex this is
    /// the sum of |z|^2).
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

pub(crate) fn shapes_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape == b.shape
}
