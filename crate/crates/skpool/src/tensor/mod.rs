//! Minimal deterministic reverse-mode autodiff over dense 2-D `f64` matrices.
//!
//! A [`Tensor`] is a cheaply clonable handle to a value matrix plus an
//! optional gradient buffer. Operations are recorded on a [`Tape`]; calling
//! [`Tape::backward`] consumes the tape and sweeps it in reverse, accumulating
//! gradients into every reachable tensor that carries a gradient buffer.
//!
//! Gradients accumulate across backward calls (one tape per forward pass);
//! callers reset them explicitly with [`Tensor::zero_grad`]. A tape can only
//! be swept once — it is consumed by value — so double-backward through one
//! graph is a compile error rather than silently doubled gradients.
//!
//! Everything here is sequential and allocation-order deterministic: the same
//! inputs produce bitwise-identical outputs and gradients across runs.

mod check;
mod segments;
mod tape;

#[cfg(test)]
mod tests;

pub use check::grad_check;
pub use segments::Segments;
pub use tape::Tape;

use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a 2-D matrix of 64-bit floats, optionally tracked for gradients.
///
/// Cloning a `Tensor` clones the handle, not the storage. Tensors without a
/// gradient buffer are constants: ops never record backward steps for them.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

struct Inner {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    fn new(rows: usize, cols: usize, values: Vec<f64>, grad: bool) -> Self {
        assert_eq!(
            rows * cols,
            values.len(),
            "tensor storage must match its shape"
        );
        let grad = grad.then(|| vec![0.0; rows * cols]);
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                rows,
                cols,
                values,
                grad,
            })),
        }
    }

    /// A tensor that never receives gradients.
    pub fn constant(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Tensor::new(rows, cols, values, false)
    }

    /// A leaf tensor with a zeroed gradient buffer (a parameter or checked input).
    pub fn leaf(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Tensor::new(rows, cols, values, true)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::constant(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.inner.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.inner.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let b = self.inner.borrow();
        (b.rows, b.cols)
    }

    pub fn shape_string(&self) -> String {
        let (r, c) = self.shape();
        format!("{r}x{c}")
    }

    pub fn is_scalar(&self) -> bool {
        self.shape() == (1, 1)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().grad.is_some()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let b = self.inner.borrow();
        assert!(row < b.rows && col < b.cols, "tensor index out of range");
        b.values[row * b.cols + col]
    }

    /// Copy of the value storage, row-major.
    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Copy of the gradient storage, if this tensor tracks one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.borrow().values.iter().all(|v| v.is_finite())
    }

    /// Add `delta` into the gradient buffer. No-op on constants.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut b = self.inner.borrow_mut();
        if let Some(g) = b.grad.as_mut() {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
    }

    pub(crate) fn grad_snapshot(&self) -> Vec<f64> {
        self.inner
            .borrow()
            .grad
            .clone()
            .expect("op output lost its gradient buffer")
    }

    /// Read values and (mutable) gradient together under one borrow.
    pub fn update_with(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let mut b = self.inner.borrow_mut();
        let Inner { values, grad, .. } = &mut *b;
        let g = grad.as_deref().unwrap_or(&[]);
        f(values, g);
    }

    /// Overwrite the value storage. Shape must be unchanged.
    pub fn set_values(&self, values: &[f64]) {
        let mut b = self.inner.borrow_mut();
        assert_eq!(b.values.len(), values.len(), "shape change not allowed");
        b.values.copy_from_slice(values);
    }

    /// Nudge a single value; used by finite differencing.
    pub fn add_to_value(&self, row: usize, col: usize, delta: f64) {
        let mut b = self.inner.borrow_mut();
        let cols = b.cols;
        b.values[row * cols + col] += delta;
    }

    pub(crate) fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().values)
    }

    /// Handle identity: true when both handles share storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let b = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("rows", &b.rows)
            .field("cols", &b.cols)
            .field("requires_grad", &b.grad.is_some())
            .finish()
    }
}
