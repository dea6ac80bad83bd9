//! A small deterministic engine for dense networks: layers with cached
//! activations for backpropagation, binary cross-entropy, Adam, central
//! difference gradient checking, and a binary checkpoint format.
//!
//! Everything is `f64`. Batches are row-major `Array2` values with one
//! sample per row.

mod adam;
mod checkpoint;
mod dense;
mod gradcheck;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dense::{Activation, DenseLayer, DenseNet, DenseNetSpec};
pub use gradcheck::{grad_check, grad_check_net, GradCheckReport};
pub use loss::{bce, bce_grad, BCE_EPS};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("backward called without a recorded forward pass")]
    NoForwardRecorded,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("missing checkpoint record {0}")]
    MissingRecord(String),
}

/// A parameter: value plus a same-shape gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Tensor {
    pub fn new(value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().chain(self.grad.iter()).all(|v| v.is_finite())
    }
}

/// Anything that owns trainable tensors in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

pub(crate) fn check_finite(a: &Array2<f64>, what: &str) -> Result<(), EngineError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EngineError::NonFinite(what.to_string()))
    }
}

pub(crate) fn expect_shape(a: &Array2<f64>, expected: &[usize]) -> Result<(), EngineError> {
    if a.shape() == expected {
        Ok(())
    } else {
        Err(EngineError::ShapeMismatch { expected: expected.to_vec(), got: a.shape().to_vec() })
    }
}
