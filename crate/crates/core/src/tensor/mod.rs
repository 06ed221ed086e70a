//! A small n-dimensional tensor with reverse-mode differentiation.
//!
//! Values are immutable once created; a tensor optionally records the
//! operation that produced it on a [`Trace`]. Calling [`Tensor::backward`] on
//! a traced scalar walks the trace in reverse and accumulates gradients into
//! the [`Parameter`] buffers that fed it. Everything is generic over the
//! element type: `f32` for training, `f64` for gradient verification.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use thiserror::Error;

mod gradcheck;
mod loss;
mod ops;

pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use loss::{l1_loss, mae_metric, mse_loss};
pub use ops::concat;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("backward requires a scalar, got {0} elements")]
    NonScalarLoss(usize),
    #[error("tensor is not attached to a trace")]
    DetachedGraph,
    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(String),
}

/// Scalar type the engine runs on.
pub trait Element:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}
impl_element!(f32);
impl_element!(f64);

type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Vec<E>>>;
type GradSink<E> = Rc<RefCell<Option<Vec<E>>>>;

struct Node<E> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<E>>,
    sink: Option<GradSink<E>>,
}

/// A recorded computation. One trace per training step; nodes are pushed in
/// topological order, so a reverse walk visits consumers before producers.
pub struct Trace<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Trace<E> {
    pub fn new() -> Rc<Self> {
        Rc::new(Trace {
            nodes: RefCell::new(Vec::new()),
        })
    }

    fn push(&self, parents: Vec<usize>, backward: BackwardFn<E>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            backward: Some(backward),
            sink: None,
        });
        nodes.len() - 1
    }

    fn push_leaf(&self, sink: Option<GradSink<E>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            sink,
        });
        nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone)]
struct NodeRef<E: Element> {
    trace: Rc<Trace<E>>,
    id: usize,
}

/// Immutable n-dimensional value array, row-major.
#[derive(Clone)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Rc<[E]>,
    node: Option<NodeRef<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::ShapeMismatch(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
            node: None,
        })
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value].into(),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::ZERO; numel].into(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<[E]> {
        self.data.clone()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.to_vec()
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_traced(&self) -> bool {
        self.node.is_some()
    }

    /// Accumulate `d loss / d leaf` into every parameter reachable from this
    /// scalar. Gradients add onto whatever the buffers already hold, so two
    /// passes over the same trace double them.
    pub fn backward(&self) -> Result<(), TensorError> {
        let node = self.node.as_ref().ok_or(TensorError::DetachedGraph)?;
        if self.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.data.len()));
        }
        let nodes = node.trace.nodes.borrow();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; nodes.len()];
        grads[node.id] = Some(vec![E::ONE]);
        for id in (0..=node.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let n = &nodes[id];
            if let Some(sink) = &n.sink {
                let mut slot = sink.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grad) {
                            *a += *g;
                        }
                    }
                    None => *slot = Some(grad.clone()),
                }
            }
            if let Some(backward) = &n.backward {
                let contributions = backward(&grad);
                debug_assert_eq!(contributions.len(), n.parents.len());
                for (&parent, contrib) in n.parents.iter().zip(contributions) {
                    match grads[parent].as_mut() {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a += *c;
                            }
                        }
                        None => grads[parent] = Some(contrib),
                    }
                }
            }
        }
        Ok(())
    }

    fn trace_of<'a>(inputs: &[&'a Tensor<E>]) -> Option<&'a Rc<Trace<E>>> {
        let mut found: Option<&Rc<Trace<E>>> = None;
        for t in inputs {
            if let Some(node) = &t.node {
                match found {
                    None => found = Some(&node.trace),
                    Some(existing) => assert!(
                        Rc::ptr_eq(existing, &node.trace),
                        "tensors from different traces combined in one operation"
                    ),
                }
            }
        }
        found
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("traced", &self.node.is_some())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

/// A named trainable tensor: mutable value storage plus a persistent gradient
/// accumulation buffer shared by every leaf bound from it.
pub struct Parameter<E: Element> {
    name: String,
    shape: Vec<usize>,
    values: Rc<RefCell<Vec<E>>>,
    grad: GradSink<E>,
    trainable: Cell<bool>,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<E>) -> Self {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        Parameter {
            name: name.into(),
            shape,
            values: Rc::new(RefCell::new(values)),
            grad: Rc::new(RefCell::new(None)),
            trainable: Cell::new(true),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.get()
    }

    /// A frozen parameter never receives gradient, even when bound on a trace.
    pub fn set_trainable(&self, trainable: bool) {
        self.trainable.set(trainable);
    }

    /// Bind the current values as a tensor. With a trace and `trainable`,
    /// the tensor is a leaf whose gradient accumulates into this parameter;
    /// otherwise it is a plain constant.
    pub fn bind(&self, trace: Option<&Rc<Trace<E>>>) -> Tensor<E> {
        let data: Rc<[E]> = self.values.borrow().clone().into();
        let node = match trace {
            Some(tr) if self.trainable.get() => Some(NodeRef {
                trace: tr.clone(),
                id: tr.push_leaf(Some(self.grad.clone())),
            }),
            _ => None,
        };
        Tensor {
            shape: self.shape.clone(),
            data,
            node,
        }
    }

    pub fn values(&self) -> Ref<'_, Vec<E>> {
        self.values.borrow()
    }

    pub fn set_values(&self, values: Vec<E>) {
        assert_eq!(values.len(), self.numel());
        *self.values.borrow_mut() = values;
    }

    pub fn value_at(&self, index: usize) -> E {
        self.values.borrow()[index]
    }

    pub fn set_value_at(&self, index: usize, value: E) {
        self.values.borrow_mut()[index] = value;
    }

    /// Apply an in-place update to the value buffer (optimizer step).
    pub fn update(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.values.borrow_mut());
    }

    /// Accumulated gradient, if any backward pass has reached this parameter.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    #[cfg(test)]
    pub(crate) fn grad_sink_ptr(&self) -> usize {
        Rc::as_ptr(&self.grad) as usize
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
