//! The tensor value type: shape, storage, gradient slot.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::rng::Rng;

/// Element precision. Data is held as `f64` either way; `F32` rounds every
/// op output (and gradient) through `f32`, so values are always exactly
/// representable in 32 bits and serialize bit-exactly.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    dtype: DType,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    // Set when this tensor was produced by a recorded op, i.e. gradients
    // can flow through it to some leaf with requires_grad.
    tracked: Cell<bool>,
}

/// Dense row-major tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

pub(crate) fn quantize(dtype: DType, data: &mut [f64]) {
    if dtype == DType::F32 {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

impl Tensor {
    fn new_inner(mut data: Vec<f64>, shape: Vec<usize>, dtype: DType) -> Tensor {
        quantize(dtype, &mut data);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                dtype,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                tracked: Cell::new(false),
            }),
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::new_inner(data, shape.to_vec(), dtype))
    }

    /// Op-output constructor: shape is trusted.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, dtype: DType) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Self::new_inner(data, shape, dtype)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        Self::new_inner(vec![0.0; shape.iter().product()], shape.to_vec(), dtype)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Tensor {
        Self::new_inner(vec![value; shape.iter().product()], shape.to_vec(), dtype)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Self::new_inner(vec![value], Vec::new(), dtype)
    }

    /// Standard-normal init scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, dtype: DType, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Self::new_inner(data, shape.to_vec(), dtype)
    }

    /// Uniform init on `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, dtype: DType, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect();
        Self::new_inner(data, shape.to_vec(), dtype)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Replace the stored values in place (used by optimizers and
    /// finite-difference probes). Length must match; F32 tensors quantize.
    pub fn set_data(&self, mut data: Vec<f64>) {
        assert_eq!(data.len(), self.numel());
        quantize(self.inner.dtype, &mut data);
        *self.inner.data.borrow_mut() = data;
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub(crate) fn set_tracked(&self, flag: bool) {
        self.inner.tracked.set(flag);
    }

    pub(crate) fn is_tracked(&self) -> bool {
        self.inner.tracked.get()
    }

    /// True when gradients should flow into or through this tensor.
    pub(crate) fn needs_grad_flow(&self) -> bool {
        self.requires_grad() || self.is_tracked()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
                quantize(self.inner.dtype, acc);
            }
            None => {
                let mut fresh = g.to_vec();
                quantize(self.inner.dtype, &mut fresh);
                *slot = Some(fresh);
            }
        }
    }

    /// Detached copy: same values, fresh identity, no grad history.
    pub fn detach(&self) -> Tensor {
        Self::new_inner(self.to_vec(), self.inner.shape.clone(), self.inner.dtype)
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.inner.shape)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{{id:{}, shape:{:?}, dtype:{:?}, requires_grad:{}}}",
            self.inner.id,
            self.inner.shape,
            self.inner.dtype,
            self.requires_grad()
        )
    }
}
