//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as it executes; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into each
//! `requires_grad` tensor. Training runs at f32; the gradient-check suite
//! instantiates the same ops at f64 so finite differences are trustworthy.
//!
//! Nodes whose inputs all have `requires_grad == false` keep their value but
//! drop their backward metadata, which is what makes no-gradient recycling
//! passes cheap: binding the weights as plain constants turns the whole pass
//! into dead tape.

pub mod gemm;
pub mod gradcheck;
mod ops;

use std::fmt;
use std::rc::Rc;

/// Element type of a tensor: f32 for training, f64 for gradient checks.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        gemm::gemm_f32(m, k, n, a, a_trans, b, b_trans, c, accumulate)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        gemm::gemm_f64(m, k, n, a, a_trans, b, b_trans, c, accumulate)
    }
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

/// Shape plus shared storage. Reshape and detach alias the same buffer.
#[derive(Clone, Debug)]
pub struct Value<T> {
    pub shape: Vec<usize>,
    pub data: Rc<Vec<T>>,
}

impl<T> Value<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Value<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: ops::Op<T>,
}

/// Error raised by tensor operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeDataMismatch {
        shape: Vec<usize>,
        data_len: usize,
    },
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    NotBroadcastable {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    InvalidAxis {
        axis: usize,
        ndim: usize,
    },
    NonScalarLoss {
        shape: Vec<usize>,
    },
    InvalidProbability {
        p: f64,
    },
    IndexOutOfRange {
        index: usize,
        bound: usize,
    },
    EmptyMask,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeDataMismatch { shape, data_len } => {
                write!(f, "shape {shape:?} implies {} elements, data has {data_len}", shape.iter().product::<usize>())
            }
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::NotBroadcastable { lhs, rhs } => {
                write!(f, "shapes {lhs:?} and {rhs:?} cannot broadcast together")
            }
            Self::InvalidAxis { axis, ndim } => write!(f, "axis {axis} out of range for {ndim}-d tensor"),
            Self::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Self::InvalidProbability { p } => write!(f, "probability {p} outside [0, 1)"),
            Self::IndexOutOfRange { index, bound } => write!(f, "index {index} out of range (< {bound})"),
            Self::EmptyMask => write!(f, "loss mask selects no cells"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Recorded computation: nodes in construction order, which is already a
/// topological order, so the backward sweep is a single reverse pass.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Insert an input tensor.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                data_len: data.len(),
            });
        }
        Ok(self.push(
            Value {
                shape: shape.to_vec(),
                data: Rc::new(data),
            },
            ops::Op::Leaf,
            requires_grad,
        ))
    }

    /// Insert a non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: T) -> TensorId {
        self.leaf(&[1], vec![v], false).expect("scalar leaf")
    }

    pub(crate) fn push(&mut self, value: Value<T>, op: ops::Op<T>, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        // Backward metadata is useless if nothing upstream wants gradients.
        let op = if requires_grad { op } else { ops::Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value.data
    }

    pub fn value(&self, id: TensorId) -> &Value<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar convenience accessor.
    pub fn scalar_value(&self, id: TensorId) -> T {
        debug_assert_eq!(self.value(id).numel(), 1);
        self.data(id)[0]
    }

    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable from the loss; detached nodes stop
    /// propagation.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss is constant with respect to every input; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone_for_backward();
            ops::backward_step(self, i, &op);
        }
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: TensorId, contribution: &[T]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let grad = node
            .grad
            .get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        debug_assert_eq!(grad.len(), contribution.len());
        for (g, &c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    pub(crate) fn grad_buffer(&mut self, id: TensorId) -> Option<&mut Vec<T>> {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(node.grad.get_or_insert_with(|| vec![T::zero(); numel]))
    }
}
