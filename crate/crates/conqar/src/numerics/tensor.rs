//! Dense `f64` tensors with shared ownership and optional gradient buffers.
//!
//! A [`Tensor`] is a cheap-to-clone handle (`Rc<RefCell<...>>`) so that the
//! gradient tape can keep references to operands without copying data and
//! so that parameter stores, optimizers and the tape all see the same
//! buffer. The engine is single-threaded per model instance; parallelism
//! (grid search) happens across instances.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    /// Same length as `data` when `requires_grad`, `None` otherwise.
    grad: Option<Vec<f64>>,
}

/// Shared handle to a dense row-major tensor.
///
/// Cloning a `Tensor` clones the handle, not the buffer: both handles see
/// every subsequent mutation. This is what lets an optimizer update a weight
/// in place and have the next forward pass pick up the new values.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl Tensor {
    /// Build a tensor from explicit shape and data. The data length must
    /// equal the product of the dimensions.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dim(format!(
                "from_vec: shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
            })),
        })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros: length matches by construction")
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("filled: length matches")
    }

    /// Rank-1 single-element tensor (shape `[1]`). Losses and traces are
    /// scalars of this form.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// Mark this tensor as a trainable leaf: allocates a zeroed gradient
    /// buffer and returns the same handle for chaining.
    pub fn requiring_grad(self) -> Tensor {
        {
            let mut inner = self.inner.borrow_mut();
            inner.requires_grad = true;
            if inner.grad.is_none() {
                inner.grad = Some(vec![0.0; inner.data.len()]);
            }
        }
        self
    }

    /// Convenience: `from_vec` + `requiring_grad`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Ok(Tensor::from_vec(shape, data)?.requiring_grad())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// The two dimensions of a matrix, or an error naming `op` if the rank
    /// is not 2.
    pub fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Dim(format!(
                "{}: expected a rank-2 tensor, got shape {:?}",
                op, shape
            )));
        }
        Ok((shape[0], shape[1]))
    }

    /// The length of a vector, or an error naming `op` if the rank is not 1.
    pub fn dim1(&self, op: &str) -> Result<usize> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(Error::Dim(format!(
                "{}: expected a rank-1 tensor, got shape {:?}",
                op, shape
            )));
        }
        Ok(shape[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Immutable view of the data buffer. Do not hold the returned guard
    /// across calls that mutate the same tensor.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.inner.borrow(), |inner| &inner.data)
    }

    /// Owned copy of the data buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// The sole element of a single-element tensor.
    ///
    /// Panics on misuse; callers only invoke this on tensors they created
    /// as scalars.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert!(
            inner.data.len() == 1,
            "item() on tensor with {} elements",
            inner.data.len()
        );
        inner.data[0]
    }

    /// Read one element by flat index.
    pub fn get(&self, idx: usize) -> f64 {
        self.inner.borrow().data[idx]
    }

    /// Overwrite one element by flat index (used by the finite-difference
    /// checker to perturb parameters in place).
    pub fn set(&self, idx: usize, value: f64) {
        self.inner.borrow_mut().data[idx] = value;
    }

    /// Replace the whole buffer, keeping the shape. Lengths must match.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::Dim(format!(
                "set_data: expected {} elements, got {}",
                inner.data.len(),
                data.len()
            )));
        }
        inner.data = data;
        Ok(())
    }

    /// Apply an in-place update to the data buffer (optimizer steps).
    pub fn update_data<F: FnOnce(&mut [f64])>(&self, f: F) {
        let mut inner = self.inner.borrow_mut();
        f(&mut inner.data);
    }

    /// Owned copy of the gradient buffer, if one exists.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Reset the gradient buffer to zeros (no-op for non-grad tensors).
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if let Some(grad) = inner.grad.as_mut() {
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add `delta` into the gradient buffer. Allocates the buffer if the
    /// tensor requires grad but has not accumulated anything yet.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        if inner.grad.is_none() {
            let len = inner.data.len();
            inner.grad = Some(vec![0.0; len]);
        }
        let grad = inner.grad.as_mut().expect("grad allocated above");
        debug_assert_eq!(grad.len(), delta.len(), "accumulate_grad length mismatch");
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Overwrite the gradient buffer with a constant (seeds the reverse
    /// sweep with dL/dL = 1).
    pub fn seed_grad(&self, value: f64) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        let len = inner.data.len();
        match inner.grad.as_mut() {
            Some(grad) => grad.iter_mut().for_each(|g| *g = value),
            None => inner.grad = Some(vec![value; len]),
        }
    }

    /// True when every element is finite (no NaN, no infinities).
    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Identity comparison: do two handles point at the same buffer?
    pub fn same_buffer(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}",
            inner.shape, inner.requires_grad
        )?;
        if inner.data.len() <= 8 {
            write!(f, ", data={:?}", inner.data)?;
        }
        write!(f, ")")
    }
}
