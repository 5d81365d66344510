//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns a tape of nodes; [`Tensor`] is a cheap handle into the
//! tape. Forward ops append nodes; [`Tensor::backward`] walks the tape in
//! reverse and accumulates gradients into every tensor whose
//! `requires_grad` flag is set (leaves, or intermediates after
//! [`Tensor::retain_grad`]).
//!
//! A graph is confined to one thread; parallel batch evaluation builds one
//! graph per worker from a shared read-only parameter snapshot.

mod lstm;
mod ops;

pub mod gradcheck;

pub(crate) use ops::Op;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) struct Node<T: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
    /// Gradient is stored here during backward.
    pub requires_grad: bool,
    /// Gradient flows through this node (it or an ancestor requires grad).
    pub needs_flow: bool,
    pub op: Op<T>,
}

pub(crate) struct Tape<T: Scalar> {
    pub nodes: Vec<Node<T>>,
    pub checked: bool,
}

/// Computation graph: a tape of nodes plus a finiteness-check flag.
pub struct Graph<T: Scalar> {
    inner: Rc<RefCell<Tape<T>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
pub struct Tensor<T: Scalar> {
    pub(crate) graph: Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                checked: false,
            })),
        }
    }

    /// Enable per-op NaN/Inf detection. Ops return `Error::Numerical` when a
    /// non-finite value appears.
    pub fn set_checked(&self, checked: bool) {
        self.inner.borrow_mut().checked = checked;
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Total bytes held by node value buffers (forward-retained activations).
    pub fn value_bytes(&self) -> usize {
        let tape = self.inner.borrow();
        tape.nodes
            .iter()
            .map(|n| n.data.len() * std::mem::size_of::<T>())
            .sum()
    }

    pub(crate) fn same_graph(&self, other: &Graph<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, node: Node<T>) -> Result<Tensor<T>> {
        debug_assert_eq!(numel(&node.shape), node.data.len());
        let mut tape = self.inner.borrow_mut();
        if tape.checked && node.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite value produced by {} (shape {:?})",
                node.op.name(),
                node.shape
            )));
        }
        let id = tape.nodes.len();
        tape.nodes.push(node);
        Ok(Tensor {
            graph: self.clone(),
            id,
        })
    }

    fn new_source(&self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor<T>> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        self.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            needs_flow: requires_grad,
            op: Op::Leaf,
        })
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn leaf(&self, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.new_source(data, shape.to_vec(), true)
    }

    /// Constant tensor; no gradient is tracked through it.
    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Result<Tensor<T>> {
        self.new_source(data, shape.to_vec(), false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<T> {
        self.constant(vec![T::zero(); numel(shape)], shape)
            .expect("shape matches data by construction")
    }

    pub fn scalar(&self, value: T) -> Tensor<T> {
        self.constant(vec![value], &[1]).expect("scalar")
    }

    pub(crate) fn with_tape<R>(&self, f: impl FnOnce(&Tape<T>) -> R) -> R {
        f(&self.inner.borrow())
    }

    pub(crate) fn with_tape_mut<R>(&self, f: impl FnOnce(&mut Tape<T>) -> R) -> R {
        f(&mut self.inner.borrow_mut())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn graph(&self) -> Graph<T> {
        self.graph.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_tape(|t| t.nodes[self.id].shape.clone())
    }

    pub fn rank(&self) -> usize {
        self.graph.with_tape(|t| t.nodes[self.id].shape.len())
    }

    pub fn numel(&self) -> usize {
        self.graph.with_tape(|t| t.nodes[self.id].data.len())
    }

    /// Copy of the value buffer (row-major).
    pub fn data(&self) -> Vec<T> {
        self.graph.with_tape(|t| t.nodes[self.id].data.clone())
    }

    /// Copy of the accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.with_tape(|t| t.nodes[self.id].grad.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.with_tape(|t| t.nodes[self.id].requires_grad)
    }

    /// Request gradient storage on an intermediate node.
    pub fn retain_grad(&self) {
        self.graph.with_tape_mut(|t| {
            let n = &mut t.nodes[self.id];
            n.requires_grad = true;
            n.needs_flow = true;
        });
    }

    pub fn zero_grad(&self) {
        self.graph.with_tape_mut(|t| t.nodes[self.id].grad = None);
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
            n.data[0]
        })
    }

    /// Constant copy of this tensor; gradients do not flow across.
    pub fn detach(&self) -> Tensor<T> {
        let (data, shape) = self
            .graph
            .with_tape(|t| (t.nodes[self.id].data.clone(), t.nodes[self.id].shape.clone()));
        self.graph
            .constant(data, &shape)
            .expect("detach preserves shape")
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// tensor with `requires_grad`; repeated calls keep accumulating until
    /// [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        let mut tape = self.graph.inner.borrow_mut();
        {
            let loss = &tape.nodes[self.id];
            if loss.data.len() != 1 {
                return Err(Error::NonScalarLoss(loss.shape.clone()));
            }
        }
        let mut flow: Vec<Option<Vec<T>>> = vec![None; self.id + 1];
        flow[self.id] = Some(vec![T::one()]);
        for id in (0..=self.id).rev() {
            let Some(g) = flow[id].take() else { continue };
            if !tape.nodes[id].needs_flow {
                continue;
            }
            if tape.nodes[id].requires_grad {
                let node = &mut tape.nodes[id];
                let grad = node.grad.get_or_insert_with(|| vec![T::zero(); node.data.len()]);
                for (acc, &v) in grad.iter_mut().zip(g.iter()) {
                    *acc = *acc + v;
                }
            }
            ops::backward_step(&mut tape, id, &g, &mut flow);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(x.shape(), vec![2, 2]);
        assert_eq!(x.data(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(x.requires_grad());
        assert!(x.grad().is_none());
    }

    #[test]
    fn shape_data_mismatch_rejected() {
        let g: Graph<f64> = Graph::new();
        assert!(g.leaf(vec![1.0, 2.0], &[3]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2]).unwrap();
        match x.backward() {
            Err(Error::NonScalarLoss(shape)) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![2.0], &[1]).unwrap();
        let y = x.detach();
        let loss = y.mul(&y).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn checked_mode_catches_nan() {
        let g: Graph<f64> = Graph::new();
        g.set_checked(true);
        let x = g.leaf(vec![-1.0], &[1]).unwrap();
        assert!(x.ln().is_err());
    }
}
