//! Dense row-major `f64` tensors with taped reverse-mode differentiation.
//!
//! Every operation executes eagerly. When any input requires a gradient the
//! output records a backward rule plus references to its inputs, so a scalar
//! loss can later be walked back to its leaves by [`ComputeGraph`].

mod gradcheck;
mod graph;
pub mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Error, Result};

pub use gradcheck::{
    check_gradients, check_gradients_with, finite_difference_gradient, relative_error,
    relu_kink_margin, FloorScale, GradCheckOptions, GradCheckReport,
};
pub use graph::ComputeGraph;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

// 0 = follow build profile, 1 = forced on, 2 = forced off
static FINITE_CHECKS: AtomicU8 = AtomicU8::new(0);

/// Turns the non-finite output check on or off for every subsequent op.
///
/// By default the check follows `debug_assertions`.
pub fn set_finite_checks(enabled: bool) {
    FINITE_CHECKS.store(if enabled { 1 } else { 2 }, Ordering::Relaxed);
}

pub fn finite_checks_enabled() -> bool {
    match FINITE_CHECKS.load(Ordering::Relaxed) {
        1 => true,
        2 => false,
        _ => cfg!(debug_assertions),
    }
}

/// Backward rule: given the op's output data and the upstream gradient,
/// produce one optional gradient per recorded input.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct GradFn {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Reference-counted handle to an immutable tensor node.
///
/// Cloning is cheap and shares the node. Only the gradient slot is mutable.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl Tensor {
    fn from_parts(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        validate_shape(&data, shape)?;
        Ok(Tensor::from_parts(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf tensor.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        validate_shape(&data, shape)?;
        Ok(Tensor::from_parts(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(vec![value; n], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![value], vec![], false, None)
    }

    /// Records the result of an op. The backward rule is kept only when some
    /// input requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Result<Tensor> {
        if finite_checks_enabled() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Ok(Tensor::from_parts(data, shape, requires_grad, grad_fn))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::contract(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape()),
            ));
        }
        Ok(self.0.data[0])
    }

    /// Copy of the accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Name of the op that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|f| f.op)
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn> {
        self.0.grad_fn.as_ref()
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Backpropagates from this scalar through every recorded op.
    pub fn backward(&self) -> Result<()> {
        ComputeGraph::build(self).backward(self)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

fn validate_shape(data: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::contract(
            "tensor",
            format!("zero-sized dimension in {shape:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::shape("tensor", shape, &[data.len()]));
    }
    Ok(())
}
