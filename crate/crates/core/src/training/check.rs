use rand::RngCore;

use crate::diffusion::{LabelField, PriorField};
use crate::ndgrad::{grad_check, softmax_channels, GradCheckReport, Graph, Tensor};
use crate::nets::{DenoiserArch, DenoiserNet};
use crate::rng::Stream;
use crate::schedule::Schedule;

use super::{record_loss, PgrdBatch, TrainConfig, TrainError};

/// Grad-check the complete objective, velocity MSE plus the sampled
/// auxiliary cross-entropy, on a miniature denoiser (`T = 10`, widths
/// `[2, 3, 4]`, 4×4 images, batch 2) in f64.
///
/// Parameters are redrawn at scale 0.4 so that the zero-initialized output
/// heads do not hide gradients.
pub fn check_objective(tolerance: f64, seed: u64) -> Result<GradCheckReport, TrainError> {
    let cfg = TrainConfig {
        dds_steps: vec![3, 5, 8],
        tau: 0.7,
        ..TrainConfig::default()
    };
    let arch = cfg.denoiser_arch(&DenoiserArch {
        widths: [2, 3, 4],
        time_dim: 4,
        steps: 10,
        ..DenoiserArch::default()
    });
    let root = Stream::new(seed, "objective-check");
    let mut net = DenoiserNet::<f64>::new(arch, root.derive("init").next_u64())?;
    for (i, t) in net.params_mut().tensors_mut().iter_mut().enumerate() {
        let mut s = root.derive_index("perturb", i as u64);
        for v in t.data_mut() {
            *v = 0.4 * s.normal();
        }
    }
    let sch = Schedule::cosine(10, 0.008, 0.999).map_err(|e| TrainError::Config(e.to_string()))?;
    let (b, h) = (2, 4);
    let randn = |name: &str, shape: &[usize]| -> Tensor<f64> { root.derive(name).normal_tensor(shape) };
    let mut labels = root.derive("labels");
    let idx: Vec<u8> = (0..b * h * h).map(|_| labels.range_inclusive(0, 1) as u8).collect();
    let batch = PgrdBatch {
        x: randn("x", &[b, 1, h, h]),
        y: LabelField::from_indices(&idx, b, 2, h, h)?,
        prior: PriorField::new(softmax_channels(&randn("prior", &[b, 2, h, h]))?)?,
        ts: vec![2, 9],
        eps: randn("eps", &[b, 2, h, h]),
        dds: Some((5, randn("dds", &[b, 2, h, h]))),
    };
    let mut g = Graph::new();
    let bound = net.bind(&mut g, true)?;
    let nodes = record_loss(&mut g, &net, &bound, &batch, &sch, &cfg)?;
    Ok(grad_check(&g, nodes.total, tolerance)?)
}

#[cfg(test)]
mod tests {
    #[test]
    fn objective_passes_for_several_seeds() {
        for seed in 0..3 {
            let report = super::check_objective(1e-4, seed).unwrap();
            assert!(report.passed, "seed {seed}: {}", report.max_rel_error());
        }
    }
}
