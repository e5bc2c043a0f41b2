use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Append-only tape of executed ops.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients are kept for it only if
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Drops every leaf gradient recorded so far.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub(crate) fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].value.requires_grad());
        #[cfg(debug_assertions)]
        {
            let inputs_finite = op.inputs().iter().all(|i| self.nodes[i.0].value.is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "{} produced a non-finite value from finite inputs",
                op.name()
            );
        }
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// across repeated calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?} from {}",
                loss_value.shape(),
                self.nodes[loss.0].op.name()
            )));
        }
        if !loss_value.requires_grad() {
            return Ok(());
        }

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.value.requires_grad() {
                continue;
            }
            if let Op::Leaf = node.op {
                adjoints[idx] = Some(upstream);
                continue;
            }
            node.op.backward(&self.nodes, &node.value, &upstream, &mut adjoints);
        }

        for (idx, adj) in adjoints.into_iter().enumerate() {
            if let Some(g) = adj {
                let node = &mut self.nodes[idx];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

/// Adds `delta` into the adjoint slot for `target`, allocating on first use.
pub(crate) fn accumulate(adjoints: &mut [Option<Vec<f64>>], nodes: &[Node], target: Var, delta: &[f64]) {
    if !nodes[target.0].value.requires_grad() {
        return;
    }
    match &mut adjoints[target.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// Mutable adjoint buffer for `target`, zero-initialised on first use.
pub(crate) fn adjoint_mut<'a>(
    adjoints: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    target: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[target.0].value.requires_grad() {
        return None;
    }
    let len = nodes[target.0].value.numel();
    Some(adjoints[target.0].get_or_insert_with(|| vec![0.0; len]))
}
