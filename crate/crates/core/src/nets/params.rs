use crate::ndgrad::{Graph, NdError, NodeId, Real, Tensor};
use crate::rng::Stream;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph nodes of a [`ParamSet`] bound into one graph, index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

impl Bound {
    pub fn get(&self, index: usize) -> NodeId {
        self.ids[index]
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// He-uniform 3x3 or 1x1 conv weight plus zero bias; `zero` zeroes both.
    /// Returns the (weight, bias) indices.
    pub fn push_conv(&mut self, seed: u64, name: &str, c_in: usize, c_out: usize, k: usize, zero: bool) -> (usize, usize) {
        let shape = [c_out, c_in, k, k];
        let w = if zero {
            Tensor::zeros(&shape)
        } else {
            let bound = (6.0 / (c_in * k * k) as f64).sqrt();
            let mut s = Stream::new(seed, &format!("init/{name}"));
            Tensor::from_fn(&shape, |_| T::of((2.0 * s.uniform() - 1.0) * bound))
        };
        let wi = self.push(format!("{name}.weight"), w);
        let bi = self.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        (wi, bi)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names_and_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Bind every tensor as a graph leaf; trainable leaves get gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound, NdError> {
        let ids = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                if trainable {
                    g.named_param(name.clone(), t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Bound { ids })
    }

    pub(crate) fn replace_all(&mut self, tensors: Vec<Tensor<T>>) {
        debug_assert_eq!(tensors.len(), self.tensors.len());
        self.tensors = tensors;
    }

    /// Little-endian bytes of every tensor in order; used for hashing and
    /// byte-level equality checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * T::BYTES);
        for t in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }
}
