//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value; [`GradGraph`] records operations on
//! a tape and plays them backward to populate leaf gradients. Compute is f64
//! throughout so finite-difference checks are reliable; the on-disk format is
//! f32 (see the data module).

mod graph;
mod optim;

pub use graph::{Binder, GradGraph, ValueId};
pub use optim::{Adam, PlateauScheduler};

use std::fmt;

/// Errors raised by tensor construction, graph ops, and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shape or dimension mismatch; the message carries both shapes.
    Shape { op: &'static str, detail: String },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// Axis out of range for the tensor's rank.
    Axis { op: &'static str, axis: usize, rank: usize },
    /// backward() called on a graph that was already traversed.
    GraphConsumed,
    /// backward() needs a scalar (single-element) loss.
    NonScalarLoss { numel: usize },
    /// Cross-entropy target out of range.
    ClassIndex { index: usize, num_classes: usize },
    /// Optimizer saw a non-finite gradient for the named parameter.
    NonFiniteGrad { param: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::NonFinite { op } => {
                write!(f, "{op}: produced a non-finite value (NaN or Inf)")
            }
            TensorError::Axis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            TensorError::GraphConsumed => {
                write!(f, "backward: graph already consumed; build a fresh graph")
            }
            TensorError::NonScalarLoss { numel } => {
                write!(f, "backward: loss must be scalar, got {numel} elements")
            }
            TensorError::ClassIndex { index, num_classes } => {
                write!(f, "cross_entropy: class index {index} >= num_classes {num_classes}")
            }
            TensorError::NonFiniteGrad { param } => {
                write!(f, "optimizer: non-finite gradient for parameter `{param}`")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major f64 tensor.
///
/// Shape dimensions are positive and `product(shape) == data.len()` always
/// holds. When a tensor lives inside a [`GradGraph`], `requires_grad` marks
/// trainable leaves and `grad` is filled by `backward`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data).expect("vector: nonempty")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Shape {
                op: "from_rows",
                detail: "ragged rows".to_string(),
            });
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    /// 2-D identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Fill with uniform values in `[-bound, bound]` scaled by fan-in/out
    /// (Glorot initialization).
    pub fn glorot(shape: &[usize], rng: &mut crate::rng::Rng) -> Self {
        let (fan_in, fan_out) = match shape {
            [n] => (*n, *n),
            [r, c] => (*c, *r),
            // higher-rank: treat trailing dims as fan-in
            dims => {
                let fan_in: usize = dims[1..].iter().product();
                (fan_in, dims[0])
            }
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("glorot: valid shape")
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Shape {
                op,
                detail: format!("expected rank-2 tensor, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    /// One row of a rank-2 tensor as a fresh 1-D tensor.
    pub fn row(&self, i: usize) -> Tensor {
        let cols = self.shape[1];
        Tensor::vector(self.data[i * cols..(i + 1) * cols].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
