use super::ops_basic::BasicOp;
use super::ops_nn::NnOp;
use super::ops_spatial::SpatialOp;
use super::{Param, Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

pub(super) enum Op<T> {
    Leaf,
    Basic(BasicOp<T>),
    Nn(NnOp<T>),
    Spatial(SpatialOp<T>),
}

struct Node<T> {
    value: Tensor<T>,
    /// Accumulated over backward passes; allocated on first use.
    grad: Option<Vec<T>>,
    op: Op<T>,
    param: Option<Param<T>>,
}

/// Wengert list: records every op of a forward pass in topological order,
/// then replays it in reverse to populate gradients.
///
/// Repeated `backward` calls on the same tape accumulate gradients
/// additively, both on nodes and on bound parameters.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

pub(super) struct GradStore<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradStore<T> {
    /// Gradient buffer for `id`, zero-allocated on first touch.
    pub fn acc(&mut self, id: NodeId, numel: usize) -> &mut [T] {
        self.bufs[id].get_or_insert_with(|| vec![T::zero(); numel])
    }

}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Gradient accumulated on a node by previous `backward` calls.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    /// Record a constant input (no gradient is tracked into callers).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, Op::Leaf, None)
    }

    /// Bind a shared parameter; its gradient receives contributions
    /// whenever this tape runs backward.
    pub fn param(&mut self, p: &Param<T>) -> NodeId {
        let value = p.value().clone();
        self.push_node(value, Op::Leaf, Some(p.clone()))
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.push_node(value, op, None)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, param: Option<Param<T>>) -> NodeId {
        #[cfg(debug_assertions)]
        {
            assert!(
                value.all_finite(),
                "non-finite value produced by tape op #{} ({})",
                self.nodes.len(),
                op_name(&op),
            );
        }
        self.nodes.push(Node { value, grad: None, op, param });
        self.nodes.len() - 1
    }

    /// Reverse sweep from a scalar loss. Visits each node exactly once and
    /// adds this pass's contributions to node and parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut store = GradStore { bufs: (0..self.nodes.len()).map(|_| None).collect() };
        store.acc(loss, 1)[0] = T::one();

        for id in (0..=loss).rev() {
            let og = match store.bufs[id].take() {
                Some(g) => g,
                None => continue,
            };
            {
                let node = &self.nodes[id];
                match &node.op {
                    Op::Leaf => {}
                    Op::Basic(op) => super::ops_basic::backward(self, op, &node.value, &og, &mut store),
                    Op::Nn(op) => super::ops_nn::backward(self, op, &node.value, &og, &mut store),
                    Op::Spatial(op) => super::ops_spatial::backward(self, op, &node.value, &og, &mut store),
                }
            }
            let node = &mut self.nodes[id];
            if let Some(p) = &node.param {
                let mut pg = p.grad_mut();
                for (dst, src) in pg.iter_mut().zip(og.iter()) {
                    *dst = *dst + *src;
                }
            }
            match &mut node.grad {
                Some(acc) => {
                    for (dst, src) in acc.iter_mut().zip(og.iter()) {
                        *dst = *dst + *src;
                    }
                }
                None => node.grad = Some(og),
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg_attr(not(debug_assertions), allow(dead_code))]
fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Basic(b) => b.name(),
        Op::Nn(n) => n.name(),
        Op::Spatial(s) => s.name(),
    }
}
