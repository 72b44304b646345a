//! One finite-difference check per registered op, on small random inputs.

use super::gradcheck::{grad_check, GradCheckReport};
use super::graph::{Graph, NodeId};
use super::ops::Op;
use super::tensor::Tensor;
use super::NdError;
use crate::rng::Stream;

/// Every op, in declaration order. `Scale` carries an arbitrary factor.
pub const ALL_OPS: [Op; 14] = [
    Op::Add,
    Op::Scale(-1.7),
    Op::ConcatChannels,
    Op::MatMul,
    Op::Conv2d,
    Op::Relu,
    Op::Silu,
    Op::Upsample2x,
    Op::AvgPool2x,
    Op::SoftmaxChannels,
    Op::CrossEntropyWithLogits,
    Op::Mse,
    Op::Sum,
    Op::AddChannelBias,
];

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradCheckReport,
}

fn randn(seed: u64, name: &str, shape: &[usize]) -> Tensor<f64> {
    Stream::new(seed, "op-suite").derive(name).normal_tensor(shape)
}

/// Reduce to a scalar against a fixed random target so every output element
/// receives a distinct upstream gradient.
fn reduce(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId, NdError> {
    let target = g.constant(randn(seed, "target", g.value(out).shape()))?;
    g.mse(out, target)
}

/// Build the probe graph for `op` and return its scalar loss.
fn probe(op: Op, seed: u64) -> Result<(Graph<f64>, NodeId), NdError> {
    let mut g = Graph::new();
    let x4 = |g: &mut Graph<f64>, name: &str, shape: &[usize]| g.named_param(name, randn(seed, name, shape));
    let out = match op {
        Op::Add | Op::Mse => {
            let a = x4(&mut g, "a", &[2, 3])?;
            let b = x4(&mut g, "b", &[2, 3])?;
            g.apply(op, &[a, b])?
        }
        Op::Scale(_) | Op::Silu | Op::SoftmaxChannels | Op::Sum => {
            let a = x4(&mut g, "a", &[2, 3, 3, 2])?;
            g.apply(op, &[a])?
        }
        Op::Relu => {
            // Bounded away from the kink by far more than the probe step.
            let v = randn(seed, "a", &[2, 3, 3, 2]).map(|v| if v.abs() < 0.1 { v + 0.2f64.copysign(v) } else { v });
            let a = g.named_param("a", v)?;
            g.relu(a)?
        }
        Op::ConcatChannels => {
            let a = x4(&mut g, "a", &[2, 1, 2, 3])?;
            let b = x4(&mut g, "b", &[2, 2, 2, 3])?;
            g.concat_channels(&[a, b, a])?
        }
        Op::MatMul => {
            let a = x4(&mut g, "a", &[3, 4])?;
            let b = x4(&mut g, "b", &[4, 5])?;
            g.matmul(a, b)?
        }
        Op::Conv2d => {
            let x = x4(&mut g, "x", &[2, 3, 5, 4])?;
            let w3 = x4(&mut g, "w3", &[2, 3, 3, 3])?;
            let b3 = x4(&mut g, "b3", &[2])?;
            let y = g.conv2d(x, w3, b3)?;
            let w1 = x4(&mut g, "w1", &[3, 2, 1, 1])?;
            let b1 = x4(&mut g, "b1", &[3])?;
            g.conv2d(y, w1, b1)?
        }
        Op::Upsample2x => {
            let a = x4(&mut g, "a", &[2, 2, 3, 2])?;
            g.upsample2x(a)?
        }
        Op::AvgPool2x => {
            let a = x4(&mut g, "a", &[2, 2, 4, 6])?;
            g.avgpool2x(a)?
        }
        Op::CrossEntropyWithLogits => {
            let logits = x4(&mut g, "logits", &[2, 3, 3, 3])?;
            let raw = x4(&mut g, "target", &[2, 3, 3, 3])?;
            let target = g.softmax_channels(raw)?;
            g.cross_entropy(logits, target)?
        }
        Op::AddChannelBias => {
            let x = x4(&mut g, "x", &[2, 3, 2, 2])?;
            let b = x4(&mut g, "b", &[2, 3])?;
            g.add_channel_bias(x, b)?
        }
    };
    let loss = if g.value(out).is_scalar() { out } else { reduce(&mut g, out, seed)? };
    Ok((g, loss))
}

/// Grad-check every op in [`ALL_OPS`] at relative `tolerance`.
pub fn check_all_ops(tolerance: f64, seed: u64) -> Result<Vec<OpCheck>, NdError> {
    ALL_OPS
        .iter()
        .map(|&op| {
            let (g, loss) = probe(op, seed)?;
            Ok(OpCheck {
                op: op.name(),
                report: grad_check(&g, loss, tolerance)?,
            })
        })
        .collect()
}
