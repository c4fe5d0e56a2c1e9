//! Reverse-mode differentiation over dense matrices.
//!
//! A [`DiffValue`] is a reference-counted node in a dynamically built graph.
//! Leaves are created with [`DiffValue::param`] (trainable) or
//! [`DiffValue::constant`]; every operation returns a new node that remembers
//! its inputs. [`DiffValue::backward`] walks the graph from a 1×1 root and
//! accumulates gradients into every trainable leaf, and into intermediate
//! nodes marked with [`DiffValue::retain_grad`].
//!
//! Graphs are `!Send`: one graph lives on one thread. Independent graphs can be
//! built on different threads.
//!
//! ```
//! use xmodal_core::autodiff::{DiffValue, Matrix};
//!
//! let x = DiffValue::param(Matrix::scalar(3.0));
//! let y = x.square();
//! y.backward().unwrap();
//! assert_eq!(y.item(), 9.0);
//! assert_eq!(x.grad().item(), 6.0);
//! ```

mod matrix;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use matrix::{dot, squared_distance, Matrix};
pub use ops::{sigmoid, RowMix};

use ops::Op;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("degenerate input to {op}: row {row} has norm {norm:e}")]
    Degenerate { op: &'static str, row: usize, norm: f64 },
    #[error("backward needs a 1x1 root, got {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("{0} is not finite")]
    NonFinite(String),
    #[error("{0}")]
    Contract(String),
}

/// Lower clamp applied to the input of `log`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Smallest row norm accepted by [`DiffValue::l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

struct Node {
    data: RefCell<Matrix>,
    grad: RefCell<Option<Matrix>>,
    requires_grad: bool,
    retain: Cell<bool>,
    op: Op,
}

/// A matrix-valued node of the differentiation graph.
#[derive(Clone)]
pub struct DiffValue(Rc<Node>);

impl fmt::Debug for DiffValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.0.data.borrow();
        f.debug_struct("DiffValue")
            .field("shape", &d.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.name())
            .finish()
    }
}

impl DiffValue {
    fn from_op(data: Matrix, op: Op) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        // Nothing upstream can receive a gradient, so the op does not need to be remembered.
        let op = if requires_grad { op } else { Op::Leaf };
        DiffValue(Rc::new(Node { data: RefCell::new(data), grad: RefCell::new(None), requires_grad, retain: Cell::new(false), op }))
    }

    /// Trainable leaf.
    pub fn param(data: Matrix) -> Self {
        DiffValue(Rc::new(Node {
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            retain: Cell::new(true),
            op: Op::Leaf,
        }))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(data: Matrix) -> Self {
        DiffValue(Rc::new(Node {
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            retain: Cell::new(false),
            op: Op::Leaf,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Matrix::scalar(v))
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Matrix> {
        self.0.data.borrow()
    }

    /// Mutable access to a leaf's value, for optimizers and codebook updates.
    pub fn data_mut(&self) -> RefMut<'_, Matrix> {
        debug_assert!(matches!(self.0.op, Op::Leaf), "only leaves may be mutated");
        self.0.data.borrow_mut()
    }

    pub fn value(&self) -> Matrix {
        self.0.data.borrow().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.data.borrow().shape()
    }

    /// Value of a 1×1 node.
    pub fn item(&self) -> f64 {
        self.0.data.borrow().item()
    }

    /// Accumulated gradient; zeros when nothing has been accumulated.
    pub fn grad(&self) -> Matrix {
        match &*self.0.grad.borrow() {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape();
                Matrix::zeros(r, c)
            }
        }
    }

    /// Keep this intermediate node's gradient after [`backward`](Self::backward).
    pub fn retain_grad(&self) {
        self.0.retain.set(true);
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn ptr_eq(&self, other: &DiffValue) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Same value, cut from the graph: nothing flows back through the result.
    pub fn detach(&self) -> DiffValue {
        Self::constant(self.value())
    }

    /// Forward value `replacement`, backward identity into `self`.
    ///
    /// This is `self + detach(replacement − self)` with the forward value made
    /// bit-exact.
    pub fn straight_through(&self, replacement: Matrix) -> Result<DiffValue, AutodiffError> {
        if replacement.shape() != self.shape() {
            return Err(AutodiffError::Shape {
                op: "straight_through",
                lhs: self.shape(),
                rhs: replacement.shape(),
            });
        }
        Ok(Self::from_op(replacement, Op::StraightThrough(self.clone())))
    }

    /// Runs reverse accumulation from a 1×1 root.
    ///
    /// Gradients add into whatever is already stored, so two calls without
    /// [`zero_grad`](Self::zero_grad) double every leaf gradient.
    pub fn backward(&self) -> Result<(), AutodiffError> {
        let (r, c) = self.shape();
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(r, c));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let index: HashMap<*const Node, usize> =
            order.iter().enumerate().map(|(i, v)| (Rc::as_ptr(&v.0), i)).collect();
        let mut adjoints: Vec<Option<Matrix>> = vec![None; order.len()];
        adjoints[order.len() - 1] = Some(Matrix::scalar(1.0));

        for i in (0..order.len()).rev() {
            let Some(g) = adjoints[i].take() else { continue };
            let node = &order[i];
            if node.0.retain.get() {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g.clone()),
                }
            }
            for (parent, pg) in node.0.op.backward(&node.data(), &g) {
                if !parent.requires_grad() {
                    continue;
                }
                let j = index[&Rc::as_ptr(&parent.0)];
                match adjoints[j].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => adjoints[j] = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` through gradient-carrying edges, parents first.
    fn topological_order(&self) -> Vec<DiffValue> {
        let mut order = Vec::new();
        let mut visited: std::collections::HashSet<*const Node> = Default::default();
        let mut stack: Vec<(DiffValue, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !visited.insert(Rc::as_ptr(&v.0)) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in v.0.op.parents() {
                if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
