//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Tensors are double-precision, heap-allocated, and confined to a single
//! thread during a forward/backward pass. Every differentiable operation
//! records its inputs and a backward closure; calling [`Tensor::backward`]
//! on a scalar walks the recorded graph in reverse topological order and
//! accumulates adjoints into every tensor marked `requires_grad`.
//!
//! Gradients accumulate across repeated backward calls; call
//! [`Tensor::zero_grad`] between steps.

mod gradcheck;
mod nn;
mod ops;

pub use gradcheck::{grad_check, DEFAULT_GRAD_CHECK_H};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

/// Errors raised by tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: numeric domain violation: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward closure: maps (output adjoint, output data) to one adjoint
/// buffer per recorded parent, in parent order.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Vec<f64>>>;

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense n-dimensional array of `f64` with an optional gradient slot.
///
/// Cloning a `Tensor` is cheap: clones share the same storage and graph
/// node. Construction is checked — data length must equal the product of
/// the shape extents and all values must be finite.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<RefCell<TensorInner>>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            inner.id, inner.shape, inner.requires_grad
        )
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(TensorError::Domain {
                op,
                detail: format!("non-finite value {v} at flat index {i}"),
            });
        }
    }
    Ok(())
}

impl Tensor {
    /// Builds a constant leaf tensor, validating length and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::Contract(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(TensorError::Contract("from_rows: no rows given".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(TensorError::Contract(format!(
                    "from_rows: row {i} has length {} but row 0 has {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(&[rows.len(), cols], data)
    }

    /// A rank-0 scalar.
    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::from_vec(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![0.0; numel], false)
    }

    /// One-hot row encoding of class labels.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(TensorError::Contract(format!(
                    "one_hot: label {y} at row {i} out of range for {classes} classes"
                )));
            }
            data[i * classes + y] = 1.0;
        }
        Tensor::from_vec(&[labels.len(), classes], data)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(RefCell::new(TensorInner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: None,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Marks this leaf as a trainable parameter so backward accumulates
    /// its gradient. Only valid on leaves (no recorded parents).
    pub fn with_grad(self) -> Tensor {
        {
            let mut inner = self.0.borrow_mut();
            assert!(
                inner.parents.is_empty(),
                "with_grad is only valid on leaf tensors"
            );
            inner.requires_grad = true;
        }
        self
    }

    /// Commits an operation result: validates finiteness and prunes the
    /// graph record when no input requires gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor(Rc::new(RefCell::new(TensorInner {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: None,
            parents,
            backward,
        }))))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.0.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    /// Copy of the stored values, row-major.
    pub fn values(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// The single stored value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.0.borrow();
        assert!(
            inner.data.len() == 1,
            "item() on tensor of shape {:?}",
            inner.shape
        );
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// True when the tensor neither requires gradients nor carries graph
    /// history — the contract produced by [`Tensor::stop_gradient`].
    pub fn is_constant(&self) -> bool {
        let inner = self.0.borrow();
        !inner.requires_grad && inner.parents.is_empty()
    }

    /// Copy of the accumulated gradient, if any backward pass reached
    /// this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Replaces the stored values in place. Shape is immutable; the new
    /// data must match the current length and be finite. Used by
    /// optimizers on leaf parameters between graph executions.
    pub fn set_values(&self, data: Vec<f64>) -> Result<()> {
        check_finite("set_values", &data)?;
        let mut inner = self.0.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(TensorError::Contract(format!(
                "set_values: length {} does not match tensor numel {}",
                data.len(),
                inner.data.len()
            )));
        }
        inner.data = data;
        Ok(())
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.borrow().id
    }

    fn accumulate_grad(&self, adj: &[f64]) {
        let mut inner = self.0.borrow_mut();
        match &mut inner.grad {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(adj) {
                    *gi += ai;
                }
            }
            None => inner.grad = Some(adj.to_vec()),
        }
    }

    /// Runs reverse-mode differentiation from a scalar loss. Adjoints are
    /// accumulated (added) into the `grad` slot of every tensor on the
    /// path that requires gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let graph = Graph::from_root(self);
        let mut adjoints: HashMap<u64, Vec<f64>> = HashMap::new();
        adjoints.insert(self.id(), vec![1.0]);
        for node in graph.nodes() {
            let adj = match adjoints.remove(&node.id()) {
                Some(a) => a,
                None => continue,
            };
            node.accumulate_grad(&adj);
            let inner = node.0.borrow();
            if let Some(backward) = &inner.backward {
                let parent_adjoints = backward(&adj, &inner.data);
                debug_assert_eq!(parent_adjoints.len(), inner.parents.len());
                for (parent, padj) in inner.parents.iter().zip(parent_adjoints) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    match adjoints.get_mut(&parent.id()) {
                        Some(existing) => {
                            for (e, v) in existing.iter_mut().zip(&padj) {
                                *e += v;
                            }
                        }
                        None => {
                            adjoints.insert(parent.id(), padj);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// The recorded computation graph reachable from one root, ordered for
/// reverse traversal: node ids are assigned monotonically at execution
/// time, so descending-id order visits every operation before its inputs.
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    /// Collects every gradient-requiring node reachable from `root`.
    pub fn from_root(root: &Tensor) -> Graph {
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if seen.contains_key(&t.id()) || !t.requires_grad() {
                continue;
            }
            seen.insert(t.id(), ());
            for p in t.0.borrow().parents.iter() {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));
        Graph { nodes }
    }

    /// Nodes in reverse topological order (root first).
    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let t = Tensor::scalar(3.5).unwrap();
        assert_eq!(t.shape(), Vec::<usize>::new());
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let doubled = t.scale(2.0).unwrap();
        assert!(matches!(
            doubled.backward(),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        let loss = t.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_gives_two_t() {
        let t = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let loss = t.mul(&t).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let t = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap().with_grad();
        let loss = t.sum().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(t.grad().unwrap(), vec![2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn graph_order_is_topological() {
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let a = t.scale(2.0).unwrap();
        let b = a.add(&t).unwrap();
        let loss = b.sum().unwrap();
        let graph = Graph::from_root(&loss);
        // every node's parents appear later in the reverse-topological list
        for (i, node) in graph.nodes().iter().enumerate() {
            for parent in node.0.borrow().parents.iter() {
                if !parent.requires_grad() {
                    continue;
                }
                let pos = graph
                    .nodes()
                    .iter()
                    .position(|n| n.id() == parent.id())
                    .expect("parent present");
                assert!(pos > i, "input must come after its consumer");
            }
        }
    }

    #[test]
    fn constant_paths_record_no_graph() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.scale(3.0).unwrap();
        assert!(b.is_constant());
    }
}
