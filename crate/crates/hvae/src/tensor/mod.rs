//! Minimal reverse-mode differentiation engine.
//!
//! Tensors are n-dimensional `f64` arrays in row-major layout. Every
//! operation whose inputs require gradients records itself into the
//! implicit computation graph (a DAG of parent links); [`Graph::trace`]
//! linearizes that DAG so [`Tensor::backward`] can sweep it exactly once
//! in reverse topological order. Gradients accumulate additively across
//! fan-out.
//!
//! The engine is deliberately small: the primitive set is exactly what a
//! desk-scale hierarchical VAE needs (convolutions, pooling/upsampling,
//! channel concat/slice, pointwise maps, reductions, embeddings), all in
//! 64-bit precision with deterministic, fixed-order reductions.

mod autograd;
mod ops;
pub mod optim;

pub use autograd::Graph;

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Errors produced by tensor construction and primitive operations.
#[derive(Debug, Clone, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite values detected in {context}")]
    NonFinite { context: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Recorded operation kind; carries whatever the backward rule needs
/// beyond the parents' and output's values.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d,
    /// x + b with b broadcast over every axis except axis 1.
    BiasChannel,
    /// x[B,C,..] + e[B,C] with e broadcast over trailing axes.
    BiasPerExample,
    /// Tile a [..] tensor into [batch, ..].
    BroadcastBatch,
    Exp,
    Log,
    Square,
    Softplus,
    Silu,
    Sigmoid,
    Tanh,
    Scale(f64),
    AddScalar(f64),
    Clamp { lo: f64, hi: f64 },
    Maximum,
    SumAll,
    MeanAll,
    SumPerExample,
    Upsample2,
    AvgPool2,
    ConcatAxis1 { sizes: Vec<usize> },
    SliceAxis1 { start: usize, len: usize },
    Embedding { indices: Vec<usize> },
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    op: Op,
}

/// Reference-counted handle to one node of the computation graph.
///
/// Cloning is cheap and shares storage. Parameter tensors are created
/// with [`Tensor::param`] and keep their storage across training steps;
/// everything else is rebuilt per step and freed when dropped.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        op: Op,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                op,
            }),
        }
    }

    /// A constant leaf (does not require gradients).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::build(data, shape.to_vec(), false, vec![], Op::Leaf))
    }

    /// A trainable leaf: gradients accumulate here during backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::build(data, shape.to_vec(), true, vec![], Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(vec![0.0; numel(shape)], shape.to_vec(), false, vec![], Op::Leaf)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(vec![value; numel(shape)], shape.to_vec(), false, vec![], Op::Leaf)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![value], vec![1], false, vec![], Op::Leaf)
    }

    /// Result of a recorded operation. Parent links are kept only when a
    /// gradient can actually flow; otherwise the node degenerates to a
    /// constant leaf and the graph stays empty (e.g. during sampling from
    /// a frozen model).
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, op: Op) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        if requires {
            Tensor::build(data, shape, true, parents, op)
        } else {
            Tensor::build(data, shape, false, vec![], Op::Leaf)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the value buffer (row-major).
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite the value buffer in place (optimizer updates). The new
    /// data must have the same length.
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// Apply an in-place update to the value buffer.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![1.0; self.len()]);
    }

    pub(crate) fn parents(&self) -> &[Tensor] {
        &self.inner.parents
    }

    pub(crate) fn op(&self) -> &Op {
        &self.inner.op
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar loss. Every `requires_grad` leaf
    /// reachable from `self` ends up with `grad = d(self)/d(leaf)`.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        Graph::trace(self).backward(self)
    }
}

#[cfg(test)]
mod tests;
