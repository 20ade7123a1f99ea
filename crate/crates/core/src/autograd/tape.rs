use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs handed to a backward rule.
pub(crate) struct BackwardArgs<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
    /// Whether input `i` needs a gradient; rules may skip work for `false`.
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    leaf: bool,
}

/// Records a forward pass. Node ids are assigned in creation order, so every
/// node's inputs precede it.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
    record: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
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
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that keeps values but never records backward rules.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor; it is trainable if `requires_grad` is set on it and
    /// the tape is recording.
    pub fn leaf(&self, mut value: Tensor) -> Var<'_> {
        let requires_grad = self.record && value.requires_grad();
        value.zero_grad();
        self.push_node(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
        })
    }

    /// Registers a trainable copy of `value`.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        let t = Tensor::from_parts(value.shape().to_vec(), value.data().to_vec());
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value.with_requires_grad(false))
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        self.leaf_grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an op. Fails if the value is not finite.
    pub(crate) fn push_op<F>(
        &self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var<'_>],
        backward: F,
    ) -> Result<Var<'_>>
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = self.record && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push_node(Node {
            value,
            inputs: ids,
            backward,
            requires_grad,
            leaf: false,
        }))
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    /// Calling it again without [`Tape::zero_grad`] adds to existing values.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "variable from another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Contract(
                "loss does not depend on any trainable tensor".into(),
            ));
        }
        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(loss.id + 1, || None);
        pending[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if node.leaf {
                accumulate(&mut leaf_grads[id], grad);
                continue;
            }
            let Some(rule) = &node.backward else {
                continue;
            };
            let args = BackwardArgs {
                inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .inputs
                    .iter()
                    .map(|&i| nodes[i].requires_grad)
                    .collect(),
            };
            let input_grads = rule(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    if nodes[input].requires_grad {
                        debug_assert_eq!(g.len(), nodes[input].value.numel());
                        accumulate(&mut pending[input], g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.leaf_grads.borrow()[var.id].clone()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::from_parts(shape, g))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads
            .borrow_mut()
            .iter_mut()
            .for_each(|g| *g = None);
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    /// Copies the current value out of the tape.
    pub fn to_tensor(&self) -> Tensor {
        let v = self.value();
        Tensor::from_parts(v.shape().to_vec(), v.data().to_vec())
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }
}
