use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamSet};
use super::{expect_dims, NetError};
use crate::ndgrad::{Checkpoint, CheckpointError, Graph, NodeId, Real, Tensor};

/// Architecture of the residual denoiser: a two-level U-Net over the
/// channel-wise concatenation `[s_t, X, prior]`, conditioned on a sinusoidal
/// time embedding added at the bottleneck, with one 1x1 auxiliary head per
/// supervised step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub image_channels: usize,
    pub classes: usize,
    /// Channel widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub time_dim: usize,
    /// Total diffusion steps `T`; valid inputs are `1..=steps`.
    pub steps: usize,
    /// Steps carrying an auxiliary head.
    pub dds_steps: Vec<usize>,
    /// Temperature applied to auxiliary logits before the softmax.
    pub tau: f64,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            image_channels: 1,
            classes: 2,
            widths: [8, 16, 32],
            time_dim: 32,
            steps: 1000,
            dds_steps: default_dds_steps(1000),
            tau: 1.0,
        }
    }
}

/// The three steps nearest to `T/4`, `T/2` and `3T/4`.
pub fn default_dds_steps(steps: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [1usize, 2, 3]
        .iter()
        .map(|q| ((q * steps) as f64 / 4.0).round().clamp(1.0, steps as f64) as usize)
        .collect();
    out.dedup();
    out
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc0: [Conv; 2],
    enc1: [Conv; 2],
    mid: [Conv; 2],
    time_proj: usize,
    dec1: [Conv; 2],
    dec0: [Conv; 2],
    out: Conv,
    aux: BTreeMap<usize, Conv>,
}

#[derive(Clone, Debug)]
pub struct DenoiserNet<T> {
    arch: DenoiserArch,
    params: ParamSet<T>,
    layout: Layout,
}

/// Graph nodes produced by one denoiser pass.
#[derive(Clone, Debug)]
pub struct DenoiserOutput {
    /// Predicted `v` for every batch item, `[B, C, H, W]`.
    pub v: NodeId,
    /// Auxiliary logits keyed by step; present only for a supervised step
    /// shared by the whole batch.
    pub aux: BTreeMap<usize, NodeId>,
}

/// Sinusoidal embedding rows `[sin(t w_i), cos(t w_i)]` with
/// `w_i = 10000^(-i / (dim/2))`.
pub fn time_embedding<T: Real>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |idx| {
        let (row, col) = (idx / dim, idx % dim);
        let i = col % half;
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = ts[row] as f64 * freq;
        T::of(if col < half { arg.sin() } else { arg.cos() })
    })
}

impl<T: Real> DenoiserNet<T> {
    pub fn new(arch: DenoiserArch, seed: u64) -> Result<Self, NetError> {
        if arch.classes < 2 || arch.image_channels == 0 || arch.widths.contains(&0) {
            return Err(NetError::Architecture(format!("unusable denoiser architecture {arch:?}")));
        }
        if arch.time_dim < 2 || arch.time_dim % 2 != 0 {
            return Err(NetError::Architecture("time embedding width must be even".into()));
        }
        if arch.dds_steps.iter().any(|&t| t == 0 || t > arch.steps) {
            return Err(NetError::Architecture(format!(
                "supervised steps {:?} outside 1..={}",
                arch.dds_steps, arch.steps
            )));
        }
        if !(arch.tau > 0.0) {
            return Err(NetError::Architecture("tau must be positive".into()));
        }
        let [w0, w1, w2] = arch.widths;
        let c = arch.classes;
        let c_in = 2 * c + arch.image_channels;
        let mut p = ParamSet::default();
        let conv = |p: &mut ParamSet<T>, name: &str, ci: usize, co: usize, k: usize, zero: bool| {
            let (w, b) = p.push_conv(seed, name, ci, co, k, zero);
            Conv { w, b }
        };
        let enc0 = [conv(&mut p, "enc0.a", c_in, w0, 3, false), conv(&mut p, "enc0.b", w0, w0, 3, false)];
        let enc1 = [conv(&mut p, "enc1.a", w0, w1, 3, false), conv(&mut p, "enc1.b", w1, w1, 3, false)];
        let mid = [conv(&mut p, "mid.a", w1, w2, 3, false), conv(&mut p, "mid.b", w2, w2, 3, false)];
        let time_proj = {
            let bound = (6.0 / arch.time_dim as f64).sqrt();
            let mut s = crate::rng::Stream::new(seed, "init/time_proj");
            p.push(
                "time_proj.weight",
                Tensor::from_fn(&[arch.time_dim, w2], |_| T::of((2.0 * s.uniform() - 1.0) * bound)),
            )
        };
        let dec1 = [conv(&mut p, "dec1.a", w2 + w1, w1, 3, false), conv(&mut p, "dec1.b", w1, w1, 3, false)];
        let dec0 = [conv(&mut p, "dec0.a", w1 + w0, w0, 3, false), conv(&mut p, "dec0.b", w0, w0, 3, false)];
        let out = conv(&mut p, "out", w0, c, 1, true);
        let aux = arch
            .dds_steps
            .iter()
            .map(|&t| (t, conv(&mut p, &format!("aux.t{t}"), w0, c, 1, true)))
            .collect();
        Ok(Self {
            arch,
            params: p,
            layout: Layout {
                enc0,
                enc1,
                mid,
                time_proj,
                dec1,
                dec0,
                out,
                aux,
            },
        })
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound, NetError> {
        Ok(self.params.bind(g, trainable)?)
    }

    fn conv_act(g: &mut Graph<T>, bound: &Bound, x: NodeId, c: Conv) -> Result<NodeId, NetError> {
        let h = g.conv2d(x, bound.get(c.w), bound.get(c.b))?;
        Ok(g.silu(h)?)
    }

    /// Record one pass on `g`. `ts` holds the step of each batch item.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        s_t: NodeId,
        x: NodeId,
        prior: NodeId,
        ts: &[usize],
    ) -> Result<DenoiserOutput, NetError> {
        let c = self.arch.classes;
        let (b, _, h, w) = expect_dims(g.value(s_t), "state", Some(c))?;
        let xd = expect_dims(g.value(x), "image", Some(self.arch.image_channels))?;
        let pd = expect_dims(g.value(prior), "prior", Some(c))?;
        if xd.0 != b || pd.0 != b || (xd.2, xd.3) != (h, w) || (pd.2, pd.3) != (h, w) {
            return Err(NetError::Shape(format!(
                "state {:?}, image {:?} and prior {:?} disagree",
                g.value(s_t).shape(),
                g.value(x).shape(),
                g.value(prior).shape()
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(NetError::Shape(format!("spatial size {h}x{w} must be divisible by 4")));
        }
        if ts.len() != b {
            return Err(NetError::Shape(format!("{} steps for a batch of {b}", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.arch.steps) {
            return Err(NetError::StepOutOfRange { t, max: self.arch.steps });
        }
        let l = &self.layout;
        let input = g.concat_channels(&[s_t, x, prior])?;
        let e0 = Self::conv_act(g, bound, input, l.enc0[0])?;
        let e0 = Self::conv_act(g, bound, e0, l.enc0[1])?;
        let d1 = g.avgpool2x(e0)?;
        let e1 = Self::conv_act(g, bound, d1, l.enc1[0])?;
        let e1 = Self::conv_act(g, bound, e1, l.enc1[1])?;
        let d2 = g.avgpool2x(e1)?;
        let m = g.conv2d(d2, bound.get(l.mid[0].w), bound.get(l.mid[0].b))?;
        let emb = g.constant(time_embedding(ts, self.arch.time_dim))?;
        let temb = g.matmul(emb, bound.get(l.time_proj))?;
        let m = g.add_channel_bias(m, temb)?;
        let m = g.silu(m)?;
        let m = Self::conv_act(g, bound, m, l.mid[1])?;
        let u1 = g.upsample2x(m)?;
        let u1 = g.concat_channels(&[u1, e1])?;
        let u1 = Self::conv_act(g, bound, u1, l.dec1[0])?;
        let u1 = Self::conv_act(g, bound, u1, l.dec1[1])?;
        let u0 = g.upsample2x(u1)?;
        let u0 = g.concat_channels(&[u0, e0])?;
        let u0 = Self::conv_act(g, bound, u0, l.dec0[0])?;
        let feat = Self::conv_act(g, bound, u0, l.dec0[1])?;
        let v = g.conv2d(feat, bound.get(l.out.w), bound.get(l.out.b))?;
        let mut aux = BTreeMap::new();
        if let Some(&t0) = ts.first() {
            if ts.iter().all(|&t| t == t0) {
                if let Some(head) = l.aux.get(&t0) {
                    aux.insert(t0, g.conv2d(feat, bound.get(head.w), bound.get(head.b))?);
                }
            }
        }
        Ok(DenoiserOutput { v, aux })
    }

    /// Inference pass returning predicted `v` with every parameter bound as
    /// a constant.
    pub fn predict(&self, s_t: &Tensor<T>, x: &Tensor<T>, prior: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>, NetError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let (si, xi, pi) = (g.constant(s_t.clone())?, g.constant(x.clone())?, g.constant(prior.clone())?);
        let out = self.forward(&mut g, &bound, si, xi, pi, ts)?;
        Ok(g.value(out.v).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            arch: serde_json::json!({"kind": "denoiser", "arch": self.arch}),
            tensors: self.params.iter().map(|(n, t)| (n.to_owned(), t.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self, NetError> {
        let kind = ck.arch.get("kind").and_then(|k| k.as_str());
        if kind != Some("denoiser") {
            return Err(NetError::Architecture(format!("expected a denoiser checkpoint, found kind {kind:?}")));
        }
        let arch: DenoiserArch = serde_json::from_value(ck.arch["arch"].clone())
            .map_err(|e| NetError::Architecture(e.to_string()))?;
        let mut net = Self::new(arch, 0)?;
        net.load_into(ck)?;
        Ok(net)
    }

    pub fn load_into(&mut self, ck: Checkpoint<T>) -> Result<(), CheckpointError> {
        let tensors = ck.take_matching(&self.params.names_and_shapes())?;
        self.params.replace_all(tensors);
        Ok(())
    }
}
