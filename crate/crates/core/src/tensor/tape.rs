//! Wengert tape: records operations during the forward pass, replays them in
//! reverse to accumulate gradients. One tape per forward pass; variable-length
//! batches just rebuild the graph each step.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Vector-Jacobian product: maps the output gradient to one input's gradient.
pub(crate) type Vjp = Box<dyn Fn(&Tensor) -> Tensor>;

pub(crate) struct Node {
    /// (parent node id, vjp) pairs; empty for leaves.
    pub parents: Vec<(usize, Vjp)>,
    pub requires_grad: bool,
}

/// Append-only operation record. Backward traverses nodes in strict reverse
/// append order, which is a valid topological order by construction.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    pub(crate) values: RefCell<Vec<Rc<Tensor>>>,
    /// Accumulated gradients per node; repeated backward calls add into these.
    grads: RefCell<Vec<Option<Tensor>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            values: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub(crate) fn push(&self, value: Tensor, parents: Vec<(usize, Vjp)>) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|(p, _)| nodes[*p].requires_grad)
        };
        self.push_with_grad_flag(value, parents, requires_grad)
    }

    fn push_with_grad_flag(
        &self,
        value: Tensor,
        parents: Vec<(usize, Vjp)>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { parents, requires_grad });
        self.values.borrow_mut().push(Rc::new(value));
        self.grads.borrow_mut().push(None);
        Var { tape: self, id }
    }

    /// Register an input tensor. Only `requires_grad` leaves receive
    /// gradients; constants participate in the forward pass only.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_with_grad_flag(value, Vec::new(), requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across repeated calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::InvalidArgument("backward: var from a different tape".into()));
        }
        {
            let values = self.values.borrow();
            if values[loss.id].numel() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    values[loss.id].shape()
                )));
            }
        }
        let n = self.len();
        // Per-sweep gradients; folded into persistent accumulators at the end.
        let mut local: Vec<Option<Tensor>> = vec![None; n];
        local[loss.id] = Some(Tensor::new(
            self.values.borrow()[loss.id].shape().to_vec(),
            vec![1.0],
        ));
        let nodes = self.nodes.borrow();
        for id in (0..n).rev() {
            let Some(g) = local[id].take() else { continue };
            for (pid, vjp) in &nodes[id].parents {
                if !nodes[*pid].requires_grad {
                    continue;
                }
                let pg = vjp(&g);
                match &mut local[*pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            if nodes[id].requires_grad {
                let mut grads = self.grads.borrow_mut();
                match &mut grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a node, if any backward sweep reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow()[var.id].clone()
    }
}

/// Handle to a tensor-valued node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.values.borrow()[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}
