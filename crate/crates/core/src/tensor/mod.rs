//! Minimal reverse-mode autodiff over dense NCHW tensors.
//!
//! Every tensor is four-dimensional; vectors and scalars use leading or
//! trailing singleton dimensions (a bias of `C` channels is `[1, C, 1, 1]`,
//! a scalar is `[1, 1, 1, 1]`).

mod checkpoint;
mod gemm;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, ParamEntry,
};
pub use gradcheck::{
    analytic_grads, grad_check, numeric_grads, relative_error, GradCheckConfig, GradCheckReport,
    Objective,
};
pub use graph::{BatchMoments, BinaryKind, CeMap, Grads, Graph, UnaryKind, Var};
pub use optim::{sgd_step, OptimState, SgdConfig};
pub use params::ParamStore;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("gradient check needs a scalar output, got shape {0:?}")]
    NonScalarOutput([usize; 4]),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Dense row-major NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != numel(&shape) {
            return Err(shape_err(
                "tensor",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); numel(&shape)],
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self {
            shape,
            data: vec![v; numel(&shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full([1, 1, 1, 1], v)
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.widen())).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.widen()).collect()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cc, hh, ww] = self.shape;
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
