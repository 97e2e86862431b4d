//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a row-major matrix plus an optional
//! gradient buffer. Differentiable operations live in [`ops`] and record
//! their backward rules onto a [`Tape`]; calling [`Tape::backward`] on a
//! scalar result replays the recorded rules in reverse and accumulates
//! gradients into every tensor created with `requires_grad`.
//!
//! Handles are `Rc`-based: a tape and the tensors it references belong to a
//! single thread. A fresh tape is used per training step.

pub mod ops;
mod tape;

pub use tape::Tape;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch: {context}: left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("value length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("convolution kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("convolution dilation must be >= 1, got {0}")]
    ZeroDilation(usize),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropoutRate(f64),
    #[error("softmax row {0} is fully masked")]
    FullyMaskedRow(usize),
    #[error("backward requires a scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("label {label} out of range for {classes} classes at frame {frame}")]
    LabelOutOfRange {
        frame: usize,
        label: usize,
        classes: usize,
    },
    #[error("label count {labels} does not match {frames} frames")]
    LabelCountMismatch { frames: usize, labels: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct TensorData<S> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Shared handle to a row-major `rows x cols` matrix.
///
/// Cloning is cheap and aliases the same storage; ops never mutate their
/// inputs, so aliased handles stay consistent during a forward pass.
pub struct Tensor<S: Scalar> {
    data: Rc<RefCell<TensorData<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            data: Rc::clone(&self.data),
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(rows: usize, cols: usize, values: Vec<S>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: values.len(),
            });
        }
        Ok(Tensor {
            data: Rc::new(RefCell::new(TensorData {
                rows,
                cols,
                values,
                requires_grad: false,
                grad: None,
            })),
        })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::BadLength {
                    rows: r,
                    cols: c,
                    len: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Tensor::from_vec(r, c, values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::from_vec(rows, cols, vec![S::zero(); rows * cols]).expect("consistent shape")
    }

    pub fn scalar(value: S) -> Self {
        Tensor::from_vec(1, 1, vec![value]).expect("consistent shape")
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn param(rows: usize, cols: usize, values: Vec<S>) -> Result<Self> {
        let t = Tensor::from_vec(rows, cols, values)?;
        t.data.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn rows(&self) -> usize {
        self.data.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.data.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.data.borrow();
        (d.rows, d.cols)
    }

    pub fn len(&self) -> usize {
        let d = self.data.borrow();
        d.rows * d.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.data.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.data.borrow_mut().requires_grad = value;
    }

    /// Borrow the values as a flat row-major slice.
    pub fn values(&self) -> Ref<'_, [S]> {
        Ref::map(self.data.borrow(), |d| d.values.as_slice())
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.borrow().values.clone()
    }

    pub fn get(&self, row: usize, col: usize) -> S {
        let d = self.data.borrow();
        d.values[row * d.cols + col]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> S {
        let d = self.data.borrow();
        debug_assert_eq!((d.rows, d.cols), (1, 1));
        d.values[0]
    }

    /// Overwrite the stored values in place, keeping the shape.
    pub fn set_values(&self, values: &[S]) {
        let mut d = self.data.borrow_mut();
        assert_eq!(values.len(), d.values.len());
        d.values.copy_from_slice(values);
    }

    /// Apply an in-place update to the stored values (optimizer use).
    pub fn update_values(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.data.borrow_mut().values)
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.data.borrow().grad.clone()
    }

    /// Gradient buffer, zeros if nothing has been accumulated.
    pub fn grad_or_zeros(&self) -> Vec<S> {
        let d = self.data.borrow();
        d.grad.clone().unwrap_or_else(|| vec![S::zero(); d.values.len()])
    }

    pub fn zero_grad(&self) {
        self.data.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, incoming: &[S]) {
        let mut d = self.data.borrow_mut();
        debug_assert_eq!(incoming.len(), d.values.len());
        match &mut d.grad {
            Some(g) => {
                for (gi, &inc) in g.iter_mut().zip(incoming) {
                    *gi = *gi + inc;
                }
            }
            None => d.grad = Some(incoming.to_vec()),
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        let mut d = self.data.borrow_mut();
        let n = d.values.len();
        d.grad = Some(vec![S::one(); n]);
    }

    /// Pointer identity of the underlying storage.
    pub fn ptr_eq(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.data, &other.data)
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.data.borrow();
        write!(
            f,
            "Tensor({}x{}, requires_grad={})",
            d.rows, d.cols, d.requires_grad
        )
    }
}
