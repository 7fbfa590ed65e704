use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::ops::{backward_rule, Op};
use super::Tensor;
use crate::error::{OclipError, Result};

pub(crate) struct Node {
    pub value: Rc<Tensor>,
    pub op: Op,
    pub requires_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Append-only record of one forward pass.
///
/// Cloning a `Tape` clones a handle to the same record. A tape is confined
/// to the thread that created it.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

/// Handle to one recorded value.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    /// Records a leaf. Gradients are only accumulated for leaves created
    /// with `requires_grad` and the nodes that depend on them.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parent ids of node `id`, in the order the operation consumed them.
    pub fn parents(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].op.parents()
    }

    pub(crate) fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        if cfg!(debug_assertions) {
            let parents = op.parents();
            let finite_inputs =
                !parents.is_empty() && parents.iter().all(|&p| inner.nodes[p].value.is_finite());
            debug_assert!(
                !finite_inputs || value.is_finite(),
                "non-finite output from {} on finite inputs",
                op.name()
            );
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order. The tape cannot be swept a second time.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !self.same_as(&loss.tape) {
            return Err(OclipError::Contract(
                "loss was recorded on a different tape".into(),
            ));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(OclipError::Contract("tape already consumed".into()));
        }
        let loss_value = &inner.nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(OclipError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        inner.consumed = true;

        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].as_ref() else {
                continue;
            };
            for (parent, contribution) in backward_rule(&node.op, &node.value, grad, nodes) {
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, node)| {
                g.map(|data| Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

/// Total derivatives of the loss with respect to every recorded node that
/// depends on a `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}
