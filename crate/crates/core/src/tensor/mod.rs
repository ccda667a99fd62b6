//! Dense float tensors with reverse-mode differentiation.
//!
//! Every value in the model is a [`Tensor`]: a row-major `f64` buffer plus a
//! shape. Tensors built from an operation whose inputs require gradients carry
//! the recorded operation (its inputs and backward rule), so the graph reachable
//! from a loss forms the tape that [`backward`] replays in reverse.
//!
//! Storage is always `f64`. Under [`Precision::F32`] every primitive rounds its
//! output through `f32`, which reproduces single-precision training numerics
//! while keeping one code path. The switch is per thread, so every tape
//! built on a thread shares one precision. Gradient checks run under [`Precision::F64`].

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::finite_difference_check;
pub use ops::{apply_primitive, topk_indices, AttrValue, Attrs, Primitive};
pub use tape::{backward, Gradients, Tape};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

pub type TensorId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations: results never require gradients
/// and intermediate values are freed as soon as they go out of scope.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            RECORDING.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(RECORDING.with(|c| c.replace(false)));
    f()
}

/// Switches the arithmetic precision of all primitives run on this thread.
pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

pub fn precision() -> Precision {
    PRECISION.with(|c| c.get())
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    pub(crate) primitive: Primitive,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<Node>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Immutable n-dimensional array; cloning shares the buffer.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(node) = &self.0.node {
            s.field("op", &node.primitive.name());
        }
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn round_to_precision(data: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            node,
            grad: RefCell::new(None),
        }))
    }

    /// Constant tensor (never differentiated).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(shape_err(
                "new",
                format!(
                    "shape {:?} holds {} elements but {} values were given",
                    shape,
                    numel_of(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Differentiable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.requiring_grad())
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::build(shape.to_vec(), vec![v; numel_of(shape)], false, None)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::build(vec![n, n], data, false, None)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel_of(shape)).map(&mut f).collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(low..high))
    }

    /// Same values, marked as a differentiable leaf with a fresh identity.
    pub fn requiring_grad(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Same values, cut from any tape.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Leaf with the same identity and gradient flag but new values. Used by
    /// optimizers so that parameter ids stay stable across updates.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.numel() {
            return Err(shape_err(
                "with_data",
                format!("expected {} values, got {}", self.numel(), data.len()),
            ));
        }
        Ok(Tensor(Rc::new(Inner {
            id: self.0.id,
            shape: self.0.shape.clone(),
            data,
            requires_grad: self.0.requires_grad,
            node: None,
            grad: RefCell::new(None),
        })))
    }

    pub(crate) fn from_op(
        primitive: Primitive,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Self {
        round_to_precision(&mut data);
        let requires_grad = RECORDING.with(|c| c.get()) && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node {
            primitive,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    /// Gradient written by the most recent [`backward`] that reached this leaf.
    pub fn grad(&self) -> Option<Tensor> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Self::build(self.0.shape.clone(), g.clone(), false, None))
    }

    pub(crate) fn set_grad(&self, g: Vec<f64>) {
        *self.0.grad.borrow_mut() = Some(g);
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(shape_err(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape()),
            ));
        }
        Ok(self.0.data[0])
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn backward(&self) -> Result<Gradients> {
        backward(self)
    }
}

impl PartialEq for Tensor {
    /// Value equality: same shape and bit-identical data.
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn check_finite(data: &[f64], context: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index],
            context: context.to_string(),
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn with_data_keeps_identity() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let q = p.with_data(vec![3.0, 4.0]).unwrap();
        assert_eq!(p.id(), q.id());
        assert!(q.requires_grad());
        assert_eq!(q.data(), &[3.0, 4.0]);
    }

    #[test]
    fn no_grad_records_nothing_and_restores() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| p.exp().unwrap());
        assert!(!y.requires_grad());
        assert!(p.exp().unwrap().requires_grad());
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        set_precision(Precision::F32);
        let x = Tensor::new(&[1], vec![0.1]).unwrap();
        let y = x.scale(1.0).unwrap();
        set_precision(Precision::F64);
        assert_eq!(y.data()[0], 0.1f32 as f64);
    }
}
