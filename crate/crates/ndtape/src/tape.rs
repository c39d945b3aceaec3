//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends a node holding its forward value and, when any
//! input requires a gradient, a boxed vector-Jacobian product. Node ids are
//! assigned in creation order, so the node list is always topologically
//! sorted and `backward` is a single reverse sweep. The tape is cleared after
//! `backward`; callers rebuild it for the next optimization step.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TapeError};
use crate::tensor::Tensor;

/// Vector-Jacobian product: maps the output adjoint to one optional adjoint
/// per input, in input order.
pub type BackwardFn = Box<dyn FnOnce(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    requires_grad: bool,
    is_leaf: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    generation: u64,
}

/// Handle to a recording tape. Cheap to clone; not `Send`.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

/// A tensor value living on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    generation: u64,
    requires_grad: bool,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let requires_grad = node.requires_grad;
        inner.nodes.push(node);
        Var {
            tape: self.clone(),
            id,
            generation: inner.generation,
            requires_grad,
            value: Rc::new(value),
        }
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(
            Node {
                requires_grad,
                is_leaf: true,
                inputs: vec![],
                backward: None,
            },
            value,
        )
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a primitive with a hand-written vector-Jacobian product.
    ///
    /// `backward` receives the adjoint of `value` and must return one entry
    /// per input; entries for inputs that do not require gradients may be
    /// `None`. It is dropped unrecorded when no input requires a gradient.
    pub fn record<F>(&self, inputs: &[&Var], value: Tensor, backward: F) -> Result<Var>
    where
        F: FnOnce(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        for v in inputs {
            self.check(v)?;
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        let node = Node {
            requires_grad,
            is_leaf: false,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        };
        Ok(self.push(node, value))
    }

    fn check(&self, v: &Var) -> Result<()> {
        let inner = self.inner.borrow();
        if !Rc::ptr_eq(&self.inner, &v.tape.inner)
            || v.generation != inner.generation
            || v.id >= inner.nodes.len()
        {
            return Err(TapeError::ForeignVar);
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every leaf
    /// that requires one (zeros when the loss does not depend on it) and
    /// clears the tape.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if self.is_empty() {
            return Err(TapeError::EmptyTape);
        }
        self.check(loss)?;
        if loss.value.len() != 1 {
            return Err(TapeError::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let mut nodes = {
            let mut inner = self.inner.borrow_mut();
            inner.generation += 1;
            std::mem::take(&mut inner.nodes)
        };
        let n = nodes.len();
        let mut adjoints: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        adjoints[loss.id] = Some(Tensor::full(loss.value.shape(), 1.0));
        let mut grads = HashMap::new();
        let mut ops_visited = 0usize;

        for id in (0..=loss.id).rev() {
            let node = &mut nodes[id];
            let Some(adj) = adjoints[id].take() else {
                continue;
            };
            if node.is_leaf {
                if node.requires_grad {
                    grads.insert(id, adj);
                }
                continue;
            }
            let Some(bw) = node.backward.take() else {
                continue;
            };
            ops_visited += 1;
            let input_adj = bw(&adj);
            let inputs = std::mem::take(&mut node.inputs);
            for (inp, g) in inputs.into_iter().zip(input_adj) {
                let Some(g) = g else { continue };
                if !nodes[inp].requires_grad {
                    continue;
                }
                match &mut adjoints[inp] {
                    Some(acc) => {
                        if acc.shape() != g.shape() {
                            return Err(TapeError::ShapeMismatch {
                                op: "backward accumulate",
                                lhs: acc.shape().to_vec(),
                                rhs: g.shape().to_vec(),
                            });
                        }
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads, ops_visited })
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.value.data()
    }

    pub fn item(&self) -> f32 {
        self.value.item()
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        self.value.clone()
    }
}

/// Leaf gradients produced by [`Tape::backward`], keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    ops_visited: usize,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    /// Gradient of `v`, or zeros of its shape when the loss does not reach it.
    pub fn wrt(&self, v: &Var) -> Tensor {
        self.grads
            .get(&v.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: &Var) -> Tensor {
        self.grads
            .remove(&v.id)
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    /// Number of recorded operations whose backward ran.
    pub fn ops_visited(&self) -> usize {
        self.ops_visited
    }
}
