//! Reverse-mode differentiable compute engine.
//!
//! A [`Tensor`] is a plain n-dimensional value. Differentiable computations are
//! recorded on a [`Graph`]: every operation appends a node holding the forward
//! value plus whatever the backward pass needs, and [`Graph::backward`] replays
//! the tape in reverse, accumulating gradients into a [`ParamSet`].

mod check;
mod graph;
pub mod kernels;
mod params;

pub use check::{GradCheck, GradCheckOutcome};
pub use graph::{Fault, Graph, Var};
pub use params::{ParamId, ParamSet, Parameter};

use std::fmt;

pub type TensorResult<T> = Result<T, TensorError>;

/// Errors emitted by tensor construction, graph operations, and backward.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Constructor received data whose length does not match the shape product.
    DataLength { shape: Vec<usize>, data_len: usize },
    /// Two operands have incompatible shapes for the given operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single-tensor precondition failed (bad rank, bad label rows, ...).
    InvalidArgument { op: &'static str, message: String },
    /// Train-mode batch norm needs at least two elements per channel.
    DegenerateBatch { elements: usize },
    /// `backward` was called on a non-scalar value.
    NotScalar { shape: Vec<usize> },
    /// An optimizer step found a parameter whose gradient was never populated.
    MissingGrad { param: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { shape, data_len } => {
                write!(f, "shape {shape:?} requires {} values, got {data_len}", shape.iter().product::<usize>())
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::InvalidArgument { op, message } => write!(f, "{op}: {message}"),
            TensorError::DegenerateBatch { elements } => {
                write!(f, "batch_norm: train mode needs >= 2 elements per channel, got {elements}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward: loss must be a scalar, got shape {shape:?}")
            }
            TensorError::MissingGrad { param } => {
                write!(f, "parameter '{param}' has no gradient; run backward first")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense n-dimensional array of f64 values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                data_len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Reinterprets the tensor as rows of its last-axis extent.
    /// A 1-d tensor is a single row; a scalar is one row of one element.
    pub fn rows(&self) -> (usize, usize) {
        let width = self.shape.last().copied().unwrap_or(1).max(1);
        (self.data.len() / width, width)
    }

    pub(crate) fn dims4(&self, op: &'static str) -> TensorResult<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(TensorError::InvalidArgument {
                op,
                message: format!("expected a 4-d tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> TensorResult<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(TensorError::InvalidArgument {
                op,
                message: format!("expected a 2-d tensor, got shape {:?}", self.shape),
            }),
        }
    }
}
