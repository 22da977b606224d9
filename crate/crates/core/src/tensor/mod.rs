//! Dense row-major tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation that touches a tensor requiring grad records a node holding
//! its inputs and a backward rule. Backward rules are themselves written with
//! tensor operations, so running a backward pass with the graph retained
//! produces gradients that are ordinary graph nodes and can be differentiated
//! again (double backprop). The fused local-attention kernel is the one
//! exception: it is first-order only.
//!
//! Broadcasting is deliberately narrow: binary operations accept identical
//! shapes or a single-element operand. Anything else goes through explicit
//! [`Tensor::reshape`] and [`Tensor::broadcast_to`].

mod autograd;
mod linalg;
mod local_attention;
mod ops;
mod scalar;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

pub use autograd::{gradients, input_gradient};
pub use local_attention::NeighborTable;
pub use scalar::Scalar;

use crate::error::{Error, Result};

/// Sentinel used by [`Tensor::gather`] to produce a zero instead of reading the source.
pub const GATHER_ZERO: usize = usize::MAX;

pub(crate) type BackwardFn<T> =
    dyn Fn(&Tensor<T>, &Tensor<T>, &[Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>>;

pub(crate) struct NodeState<T: Scalar> {
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: Box<BackwardFn<T>>,
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: &'static str,
    pub(crate) state: RefCell<Option<NodeState<T>>>,
}

pub(crate) struct Inner<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Tensor<T>>>,
    pub(crate) node: Option<Node<T>>,
}

/// An n-dimensional array participating in a differentiation graph.
///
/// Cloning is cheap (reference counted). Data is immutable once created; only
/// the accumulated gradient of a leaf changes.
pub struct Tensor<T: Scalar = f32>(pub(crate) Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations on this thread currently record graph nodes.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Sets the recording mode for the current thread until the guard drops.
pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Disables graph recording until the guard drops.
pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Rc<Vec<T>>,
        requires_grad: bool,
        node: Option<Node<T>>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Creates a constant tensor. Fails if the data length does not match the shape.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!("shape {shape:?} needs {} values, got {}", numel_of(shape), data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::invalid("from_vec", format!("zero extent in {shape:?}")));
        }
        Ok(Self::build(shape.to_vec(), Rc::new(data), false, None))
    }

    /// Creates a trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.with_requires_grad(true))
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), Rc::new(vec![value]), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), Rc::new(vec![value; numel_of(shape)]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub(crate) fn raw(data: Vec<T>, shape: Vec<usize>) -> Self {
        Self::build(shape, Rc::new(data), false, None)
    }

    /// Records the result of an operation. A graph node is attached only when
    /// grad mode is on and at least one input requires grad.
    pub(crate) fn from_op<F>(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: &[&Tensor<T>],
        backward: F,
    ) -> Self
    where
        F: Fn(&Tensor<T>, &Tensor<T>, &[Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        Self::from_op_shared(Rc::new(data), shape, op, inputs, backward)
    }

    pub(crate) fn from_op_shared<F>(
        data: Rc<Vec<T>>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: &[&Tensor<T>],
        backward: F,
    ) -> Self
    where
        F: Fn(&Tensor<T>, &Tensor<T>, &[Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        if is_grad_enabled() && inputs.iter().any(|t| t.requires_grad()) {
            let node = Node {
                op,
                state: RefCell::new(Some(NodeState {
                    inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                    backward: Box::new(backward),
                })),
            };
            Self::build(shape, data, true, Some(node))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.0.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when the tensor was not produced by a recorded operation.
    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the producing operation, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Gradient accumulated by [`Tensor::backward`] on this leaf.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A new leaf sharing this tensor's data, with the given `requires_grad`.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.0.shape.clone(), self.shared_data(), requires_grad, None)
    }

    /// A constant leaf sharing this tensor's data.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub(crate) fn accumulate_grad(&self, g: Tensor<T>) -> Result<()> {
        let mut slot = self.0.grad.borrow_mut();
        let next = match slot.take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        };
        *slot = Some(next);
        Ok(())
    }

    /// Cast into another scalar type (as a constant).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::raw(data, self.shape().to_vec())
    }

    /// Iterator-friendly strides for row-major layout.
    pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
        let mut strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        strides
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_length() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(t.is_leaf());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = {
            let _g = no_grad();
            x.mul(&x).unwrap()
        };
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        let z = x.mul(&x).unwrap();
        assert!(z.requires_grad());
        assert_eq!(z.op_name(), Some("mul"));
    }

    #[test]
    fn detach_shares_data_without_graph() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = x.detach();
        assert!(!d.requires_grad());
        assert_eq!(d.data(), x.data());
    }
}
