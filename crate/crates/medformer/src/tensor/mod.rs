//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns a flat buffer of `f32` or `f64` elements plus a shape.
//! Differentiable ops record the graph on the fly: each result keeps its
//! parent tensors and a closure that maps the upstream adjoint to parent
//! adjoints. [`GradTape::for_loss`] linearizes that graph in reverse
//! topological order and [`GradTape::backward`] replays it, accumulating
//! exactly one gradient per trainable leaf.
//!
//! Conventions:
//! - buffers are immutable after construction except through
//!   [`Tensor::update_data`], which is reserved for optimizer steps;
//! - every op validates shapes up front and rejects non-finite results,
//!   so NaN/Inf surface as errors at the op that produced them;
//! - reductions (sums, means, matmul inner products, normalization
//!   statistics) accumulate in `f64` regardless of the element type.

mod autodiff;
mod check;
mod ops;

pub use autodiff::{grad_enabled, no_grad, GradTape};
pub use check::{finite_diff_grad, finite_diff_inplace, max_rel_err};

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, NumCast, ToPrimitive};
use thiserror::Error;

/// Element type of a tensor buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Stable textual name used in checkpoint headers.
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Inverse of [`Dtype::name`].
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element backing a tensor: `f32` or `f64`.
pub trait Scalar: Float + Default + fmt::Debug + fmt::Display + 'static {
    const DTYPE: Dtype;

    /// Narrowing conversion from `f64` (named to avoid clashing with
    /// `num_traits::FromPrimitive::from_f64`).
    fn cast(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to every scalar type")
    }

    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every scalar type converts to f64")
    }

    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);

    /// Decode one element from exactly `Self::DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes per f32"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes per f64"))
    }
}

/// Errors from tensor construction, ops, and the backward pass.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument for shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward through {op} produced a non-finite gradient")]
    NonFiniteGrad { op: &'static str },
    #[error("expected a scalar tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub(crate) type OpResult<T> = Result<Tensor<T>, TensorError>;

/// Adjoint function: given the upstream gradient, add each parent's
/// contribution into the matching pre-zeroed buffer.
pub(crate) type BackFn<T> = Box<dyn Fn(&[T], &mut [Vec<T>])>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    /// Name of the op that produced this tensor; leaves use `"leaf"`.
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: Option<BackFn<T>>,
}

/// A shared handle to an immutable n-dimensional array.
///
/// Cloning is cheap (reference count bump) and clones alias the same
/// buffer, so a parameter tensor stays the same object across optimizer
/// steps, graphs, and checkpoints.
pub struct Tensor<T: Scalar> {
    pub(crate) inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("op", &self.inner.op)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

fn check_len<T: Scalar>(data: &[T], shape: &[usize]) -> Result<(), TensorError> {
    let expect: usize = shape.iter().product();
    if data.len() != expect {
        return Err(TensorError::InvalidShape {
            op: "from_vec",
            shape: shape.to_vec(),
            msg: format!("buffer has {} elements, shape wants {}", data.len(), expect),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn new_leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                op: "leaf",
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Build a tensor from a flat row-major buffer. Rejects length/shape
    /// disagreements and non-finite elements.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self, TensorError> {
        check_len(&data, shape)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self::new_leaf(data, shape.to_vec(), false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_leaf(vec![T::zero(); shape.iter().product()], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new_leaf(vec![value; shape.iter().product()], shape.to_vec(), false)
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// I.i.d. normal draws. Sampling happens in `f64` so that a given seed
    /// produces the same values (up to rounding) for every element type.
    pub fn randn(shape: &[usize], mean: f64, std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(mean, std).expect("finite std");
        let data = (0..shape.iter().product())
            .map(|_| T::cast(dist.sample(rng)))
            .collect();
        Self::new_leaf(data, shape.to_vec(), false)
    }

    /// Mark this tensor as a trainable leaf so backward deposits a gradient
    /// on it. Only freshly constructed leaves can be marked.
    pub fn trainable(self) -> Self {
        assert!(
            self.inner.backward.is_none(),
            "trainable() applies to leaf tensors only"
        );
        self.inner.requires_grad.set(true);
        self
    }

    /// Internal constructor for op results: validates finiteness and wires
    /// the node into the graph when recording is enabled.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor<T>>,
        backward: BackFn<T>,
    ) -> OpResult<T> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "{op} shape bug");
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let record = grad_enabled() && parents.iter().any(|p| p.tracks_grad());
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                op,
                parents: if record { parents } else { Vec::new() },
                backward: if record { Some(backward) } else { None },
            }),
        })
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

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    /// Borrow the flat row-major buffer.
    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a `[1]`-shaped tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.inner.shape.clone(),
            });
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// True when this tensor participates in gradient flow, either as a
    /// trainable leaf or as the result of a recorded op.
    pub(crate) fn tracks_grad(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.backward.is_some()
    }

    pub(crate) fn op_name(&self) -> &'static str {
        self.inner.op
    }

    pub(crate) fn parents(&self) -> &[Tensor<T>] {
        &self.inner.parents
    }

    pub(crate) fn backward_fn(&self) -> Option<&BackFn<T>> {
        self.inner.backward.as_ref()
    }

    /// Gradient accumulated by the latest backward pass, if any. `None`
    /// means "zero": the leaf did not participate in the loss.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Drop any accumulated gradient.
    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// In-place mutation hook for optimizers. Everything else must treat
    /// tensors as immutable; mutating a buffer that is captured inside a
    /// live graph between its forward and backward pass is a logic error.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    /// Bitwise equality of shapes and buffers (no tolerance).
    pub fn bits_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data().iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
