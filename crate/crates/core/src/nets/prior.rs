use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamSet};
use super::{expect_dims, NetError};
use crate::ndgrad::{Checkpoint, CheckpointError, Graph, NodeId, Real, Tensor};

/// Architecture of the coarse prior predictor: a plain stack of 3x3 convs at
/// full resolution, no down/upsampling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorArch {
    pub image_channels: usize,
    pub classes: usize,
    pub width: usize,
    pub layers: usize,
}

impl Default for PriorArch {
    fn default() -> Self {
        Self {
            image_channels: 1,
            classes: 2,
            width: 8,
            layers: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PriorNet<T> {
    arch: PriorArch,
    params: ParamSet<T>,
    convs: Vec<(usize, usize)>,
    frozen: bool,
}

impl<T: Real> PriorNet<T> {
    pub fn new(arch: PriorArch, seed: u64) -> Result<Self, NetError> {
        if arch.layers < 2 || arch.classes < 2 || arch.width == 0 || arch.image_channels == 0 {
            return Err(NetError::Architecture(format!("unusable prior architecture {arch:?}")));
        }
        let mut params = ParamSet::default();
        let mut convs = Vec::with_capacity(arch.layers);
        for layer in 0..arch.layers {
            let c_in = if layer == 0 { arch.image_channels } else { arch.width };
            let last = layer + 1 == arch.layers;
            let c_out = if last { arch.classes } else { arch.width };
            convs.push(params.push_conv(seed, &format!("prior.conv{layer}"), c_in, c_out, 3, last));
        }
        Ok(Self {
            arch,
            params,
            convs,
            frozen: false,
        })
    }

    pub fn arch(&self) -> &PriorArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Mutable parameters; `None` once frozen.
    pub fn params_mut(&mut self) -> Option<&mut ParamSet<T>> {
        (!self.frozen).then_some(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Consume the net and return it frozen: every later bind produces
    /// constants, so no gradient can reach its parameters.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Bind parameters into `g`. Frozen nets always bind as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound, NetError> {
        Ok(self.params.bind(g, trainable && !self.frozen)?)
    }

    /// Per-class logits node for image node `x` (`[B, Cx, H, W]`).
    pub fn logits(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> Result<NodeId, NetError> {
        expect_dims(g.value(x), "prior image", Some(self.arch.image_channels))?;
        let mut h = x;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            h = g.conv2d(h, bound.get(w), bound.get(b))?;
            if i + 1 < self.convs.len() {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Prior probability field for a batch of images.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let xi = g.constant(x.clone())?;
        let logits = self.logits(&mut g, &bound, xi)?;
        let p = g.softmax_channels(logits)?;
        Ok(g.value(p).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            arch: serde_json::json!({"kind": "prior", "arch": self.arch, "frozen": self.frozen}),
            tensors: self.params.iter().map(|(n, t)| (n.to_owned(), t.clone())).collect(),
        }
    }

    /// Rebuild a net from the architecture recorded in `ck`.
    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self, NetError> {
        let kind = ck.arch.get("kind").and_then(|k| k.as_str());
        if kind != Some("prior") {
            return Err(NetError::Architecture(format!("expected a prior checkpoint, found kind {kind:?}")));
        }
        let arch: PriorArch = serde_json::from_value(ck.arch["arch"].clone())
            .map_err(|e| NetError::Architecture(e.to_string()))?;
        let frozen = ck.arch["frozen"].as_bool().unwrap_or(false);
        let mut net = Self::new(arch, 0)?;
        net.load_into(ck)?;
        net.frozen = frozen;
        Ok(net)
    }

    /// Overwrite this net's parameters from `ck`, which must carry every
    /// tensor with the expected shape.
    pub fn load_into(&mut self, ck: Checkpoint<T>) -> Result<(), CheckpointError> {
        let tensors = ck.take_matching(&self.params.names_and_shapes())?;
        self.params.replace_all(tensors);
        Ok(())
    }
}
