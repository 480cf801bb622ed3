//! Define-by-run tape and the reverse sweep.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::conv::ConvGeom;
use crate::elementwise::{BinaryKind, UnaryKind};
use crate::error::{AutodiffError, Result};
use crate::reduce::ReduceKind;
use crate::tensor::Tensor;

/// Recorded primitive application. Inputs are node ids on the same tape,
/// always smaller than the id of the node that holds the op.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Unary {
        input: usize,
        kind: UnaryKind,
    },
    Binary {
        lhs: usize,
        rhs: usize,
        kind: BinaryKind,
    },
    Reduce {
        input: usize,
        kind: ReduceKind,
        keep_shape: Vec<usize>,
        /// Winning input offset per output element (min/max only).
        arg: Vec<usize>,
    },
    MatMul {
        lhs: usize,
        rhs: usize,
    },
    Transpose {
        input: usize,
    },
    Reshape {
        input: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        geom: ConvGeom,
    },
    Conv2dInputGrad {
        grad_out: usize,
        weight: usize,
        geom: ConvGeom,
    },
    GridSample {
        input: usize,
        grid: usize,
    },
    AffineGrid {
        theta: usize,
    },
    Narrow0 {
        input: usize,
        start: usize,
    },
    Select0 {
        input: usize,
        rows: Vec<usize>,
    },
    Concat0 {
        inputs: Vec<usize>,
    },
    FlipLast {
        input: usize,
    },
    Where {
        mask: Vec<bool>,
        on_true: usize,
        on_false: usize,
    },
    StraightThrough {
        input: Option<usize>,
        mu: Option<usize>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Records every primitive applied to its variables so that
/// [`Tape::backward`] can replay them in reverse.
///
/// Nodes are only ever appended, so the insertion order is a topological
/// order of the graph. Leaves that require a gradient accumulate it across
/// `backward` calls until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f32>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("requires_grad", &node.requires_grad)
            .field("value", &node.value)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f32) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let id = self.push_node(Rc::new(value), Op::Leaf, requires_grad);
        Var { tape: self, id }
    }

    fn push_node(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        nodes.len() - 1
    }

    /// Append the result of a primitive. The node requires a gradient iff
    /// any of `inputs` does; otherwise the backward rule is dropped.
    pub(crate) fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let id = self.push_node(Rc::new(value), op, requires_grad);
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if it has received one.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("gradient shape matches value"))
    }

    /// Gradient of a leaf, or zeros of its shape if nothing reached it.
    pub fn grad_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.grad(var)
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every
    /// reachable leaf that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(
                loss_node.value.shape().to_vec(),
            ));
        }
        if !loss_node.requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss.id + 1);
        pending.resize_with(loss.id + 1, || None);
        pending[loss.id] = Some(vec![1.0]);

        let mut leaf_grads = self.grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let contributions = crate::backward::apply(&nodes, node, &g);
            for (input, contrib) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.len(), nodes[input].value.numel());
                match &mut pending[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn item(&self) -> Option<f32> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Same value, cut out of the graph. Shares storage with `self`, so the
    /// value is bitwise identical.
    pub fn stop_grad(self) -> Var<'t> {
        let value = self.tape.value_of(self.id);
        let id = self.tape.push_node(value, Op::Leaf, false);
        Var { tape: self.tape, id }
    }

    /// Run the reverse sweep with `self` as the loss.
    pub fn backward(self) -> Result<()> {
        self.tape.backward(self)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }
}
