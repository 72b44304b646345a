use std::collections::BTreeMap;

use super::TrainError;
use crate::ndgrad::{Graph, NodeId, Real};

/// Mean squared error over every element of the velocity field.
pub fn loss_vel<T: Real>(g: &mut Graph<T>, v_hat: NodeId, v: NodeId) -> Result<NodeId, TrainError> {
    Ok(g.mse(v_hat, v)?)
}

/// Sum over heads of pixel-averaged cross-entropy between
/// `softmax(logits / tau)` and the one-hot label `y`.
pub fn loss_dds<T: Real>(
    g: &mut Graph<T>,
    aux: &BTreeMap<usize, NodeId>,
    y: NodeId,
    tau: f64,
    supervised: &[usize],
) -> Result<NodeId, TrainError> {
    if !(tau > 0.0) {
        return Err(TrainError::Config(format!("temperature {tau} must be positive")));
    }
    let mut total = None;
    for (&t, &logits) in aux {
        if !supervised.contains(&t) {
            return Err(TrainError::Config(format!("auxiliary logits at unsupervised step {t}")));
        }
        let scaled = g.scale(logits, 1.0 / tau)?;
        let ce = g.cross_entropy(scaled, y)?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    total.ok_or_else(|| TrainError::Config("no auxiliary logits to supervise".into()))
}

/// `l_vel + lambda * l_dds`, or `l_vel` alone when the auxiliary term is
/// absent.
pub fn loss_total<T: Real>(g: &mut Graph<T>, l_vel: NodeId, l_dds: Option<NodeId>, lambda: f64) -> Result<NodeId, TrainError> {
    match l_dds {
        None => Ok(l_vel),
        Some(d) => {
            let weighted = g.scale(d, lambda)?;
            Ok(g.add(l_vel, weighted)?)
        }
    }
}

/// Scalar form of [`loss_total`], used for traces.
pub fn combine(l_vel: f64, l_dds: Option<f64>, lambda: f64) -> f64 {
    l_vel + l_dds.map_or(0.0, |d| lambda * d)
}
