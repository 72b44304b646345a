use std::collections::HashMap;

use super::ops::{self, Op};
use super::tensor::{Real, Tensor};
use super::NdError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Kind {
    Leaf { name: Option<String> },
    Op(Op),
}

#[derive(Clone, Debug)]
pub(crate) struct Node<T> {
    pub(crate) kind: Kind,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order because inputs must exist before use.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    map: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, name: Option<String>) -> Result<NodeId, NdError> {
        if !value.all_finite() {
            return Err(NdError::NonFinite {
                op: "leaf",
                stage: "input",
            });
        }
        self.nodes.push(Node {
            kind: Kind::Leaf { name },
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId, NdError> {
        self.push_leaf(value, true, None)
    }

    pub fn named_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<NodeId, NdError> {
        self.push_leaf(value, true, Some(name.into()))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId, NdError> {
        self.push_leaf(value, false, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id.0].kind {
            Kind::Leaf { name } => name.as_deref(),
            Kind::Op(_) => None,
        }
    }

    /// Leaves that require a gradient, in creation order.
    pub fn grad_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, Kind::Leaf { .. }) && n.requires_grad)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Record `op` applied to `inputs` and return the new node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, NdError> {
        let value = {
            let xs: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            ops::forward(op, &xs)?
        };
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            kind: Kind::Op(op),
            inputs: inputs.to_vec(),
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, NdError> {
        self.apply(Op::Scale(k), &[a])
    }
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId, NdError> {
        self.apply(Op::ConcatChannels, xs)
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::Conv2d, &[x, w, b])
    }
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::Relu, &[x])
    }
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::Silu, &[x])
    }
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::Upsample2x, &[x])
    }
    pub fn avgpool2x(&mut self, x: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::AvgPool2x, &[x])
    }
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::SoftmaxChannels, &[x])
    }
    pub fn cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::CrossEntropyWithLogits, &[logits, target])
    }
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::Mse, &[a, b])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::Sum, &[x])
    }
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.apply(Op::AddChannelBias, &[x, b])
    }

    /// Reverse-mode accumulation from a scalar node. Visits every node that
    /// requires a gradient exactly once, in reverse creation order; fan-out
    /// contributions are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NdError> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(NdError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        let mut map = HashMap::new();
        if !root.requires_grad {
            return Ok(Gradients { map });
        }
        pending[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            match node.kind {
                Kind::Leaf { .. } => {
                    map.insert(NodeId(i), g);
                }
                Kind::Op(op) => {
                    let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                    let wants: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
                    let grads = ops::backward(op, &xs, &node.value, &g, &wants)?;
                    for (input, grad) in node.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        match &mut pending[input.0] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                                    *a += *b;
                                }
                            }
                            slot @ None => *slot = Some(grad),
                        }
                    }
                }
            }
        }
        Ok(Gradients { map })
    }

    /// Re-evaluate the graph up to `target` with `leaf` replaced by `value`.
    /// Also returns the sign pattern of every affected relu input, which the
    /// gradient checker uses to detect kinks.
    pub(crate) fn replay(&self, leaf: NodeId, value: &Tensor<T>, target: NodeId) -> Result<(Tensor<T>, Vec<bool>), NdError> {
        let n = target.0 + 1;
        let mut fresh: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut affected = vec![false; n];
        affected[leaf.0] = true;
        fresh[leaf.0] = Some(value.clone());
        let mut signs = Vec::new();
        for i in leaf.0 + 1..n {
            let node = &self.nodes[i];
            let Kind::Op(op) = node.kind else { continue };
            if !node.inputs.iter().any(|id| affected[id.0]) {
                continue;
            }
            affected[i] = true;
            let xs: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|id| fresh[id.0].as_ref().unwrap_or(&self.nodes[id.0].value))
                .collect();
            if op == Op::Relu {
                signs.extend(xs[0].data().iter().map(|&v| v > T::zero()));
            }
            fresh[i] = Some(ops::forward(op, &xs)?);
        }
        let out = fresh[target.0].take().unwrap_or_else(|| self.nodes[target.0].value.clone());
        Ok((out, signs))
    }
}
