//! Central finite-difference verification of [`Graph::backward`].

use super::graph::{Graph, NodeId};
use super::NdError;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many evenly spaced elements of each leaf.
    pub max_elements_per_leaf: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            floor: 1e-6,
            max_elements_per_leaf: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub node: NodeId,
    pub name: Option<String>,
    pub checked: usize,
    /// Elements skipped because a relu input crosses zero within the
    /// perturbation (a non-differentiable point).
    pub kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub leaves: Vec<LeafReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn non_differentiable(&self) -> bool {
        self.leaves.iter().any(|l| l.kinks > 0)
    }
}

/// Compare the analytic gradient of the scalar `loss` against central
/// differences for every leaf that requires a gradient.
pub fn grad_check(g: &Graph<f64>, loss: NodeId, tolerance: f64) -> Result<GradCheckReport, NdError> {
    grad_check_with(g, loss, tolerance, &GradCheckOptions::default())
}

pub fn grad_check_with(
    g: &Graph<f64>,
    loss: NodeId,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NdError> {
    let grads = g.backward(loss)?;
    let mut leaves = Vec::new();
    for leaf in g.grad_leaves() {
        if leaf.index() > loss.index() {
            continue;
        }
        let base = g.value(leaf);
        let (_, base_signs) = g.replay(leaf, base, loss)?;
        let analytic = grads.get(leaf);
        let n = base.len();
        let stride = match opts.max_elements_per_leaf {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut report = LeafReport {
            node: leaf,
            name: g.leaf_name(leaf).map(str::to_owned),
            checked: 0,
            kinks: 0,
            max_rel_error: 0.0,
        };
        let mut probe = base.clone();
        for i in (0..n).step_by(stride) {
            let x0 = base.data()[i];
            probe.data_mut()[i] = x0 + opts.step;
            let (plus, plus_signs) = g.replay(leaf, &probe, loss)?;
            probe.data_mut()[i] = x0 - opts.step;
            let (minus, minus_signs) = g.replay(leaf, &probe, loss)?;
            probe.data_mut()[i] = x0;
            // A relu input on 0 flips sign under one of the two probes.
            let at_kink = plus_signs != base_signs || minus_signs != base_signs;
            if at_kink {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus.item() - minus.item()) / (2.0 * opts.step);
            let exact = analytic.map_or(0.0, |t| t.data()[i]);
            let denom = exact.abs().max(numeric.abs()).max(opts.floor);
            report.max_rel_error = report.max_rel_error.max((exact - numeric).abs() / denom);
            report.checked += 1;
        }
        leaves.push(report);
    }
    let passed = leaves.iter().all(|l| l.max_rel_error <= tolerance);
    Ok(GradCheckReport {
        tolerance,
        leaves,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn linear_graph_passes_tightly() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.7)).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        let l = g.sum(y).unwrap();
        let report = grad_check(&g, l, 1e-8).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[4], vec![-1.2, -0.3, 0.4, 2.0]).unwrap()).unwrap();
        let y = g.relu(x).unwrap();
        let z = g.mse(y, x).unwrap();
        let report = grad_check(&g, z, 1e-4).unwrap();
        assert!(report.passed && !report.non_differentiable(), "{report:?}");
    }

    #[test]
    fn relu_at_kink_is_flagged_and_excluded() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap()).unwrap();
        let y = g.relu(x).unwrap();
        let l = g.sum(y).unwrap();
        let report = grad_check(&g, l, 1e-4).unwrap();
        assert!(report.non_differentiable());
        assert_eq!(report.leaves[0].kinks, 1);
        assert_eq!(report.leaves[0].checked, 2);
        assert!(report.passed);
    }
}
