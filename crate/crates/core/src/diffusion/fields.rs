use crate::ndgrad::{Real, Tensor};

use super::DiffusionError;

/// Per-pixel one-hot class field `[B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelField<T>(Tensor<T>);

impl<T: Real> LabelField<T> {
    /// Validate that every pixel has exactly one channel set to 1.
    pub fn new(t: Tensor<T>) -> Result<Self, DiffusionError> {
        let (b, c, h, w) = t.dims4("label field")?;
        let hw = h * w;
        for bi in 0..b {
            for p in 0..hw {
                let mut ones = 0;
                for ch in 0..c {
                    let v = t.data()[(bi * c + ch) * hw + p];
                    if v == T::one() {
                        ones += 1;
                    } else if v != T::zero() {
                        return Err(DiffusionError::InvalidLabel(format!("value {v} at batch {bi}, pixel {p}")));
                    }
                }
                if ones != 1 {
                    return Err(DiffusionError::InvalidLabel(format!("{ones} active classes at batch {bi}, pixel {p}")));
                }
            }
        }
        Ok(Self(t))
    }

    /// One-hot encode class indices laid out `[B, H, W]`.
    pub fn from_indices(indices: &[u8], batch: usize, classes: usize, h: usize, w: usize) -> Result<Self, DiffusionError> {
        let hw = h * w;
        if indices.len() != batch * hw {
            return Err(DiffusionError::Shape(format!(
                "{} class indices for a {batch}x{h}x{w} field",
                indices.len()
            )));
        }
        let mut t = Tensor::zeros(&[batch, classes, h, w]);
        for (i, &k) in indices.iter().enumerate() {
            let k = k as usize;
            if k >= classes {
                return Err(DiffusionError::InvalidLabel(format!("class {k} with only {classes} classes")));
            }
            let (bi, p) = (i / hw, i % hw);
            t.data_mut()[(bi * classes + k) * hw + p] = T::one();
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Class index per pixel, `[B, H, W]` flattened.
    pub fn indices(&self) -> Vec<u8> {
        argmax_channels(&self.0)
    }
}

/// Per-pixel class probabilities `[B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorField<T>(Tensor<T>);

/// Channel sums of a probability field may deviate from 1 by at most this.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;

impl<T: Real> PriorField<T> {
    pub fn new(t: Tensor<T>) -> Result<Self, DiffusionError> {
        let (b, c, h, w) = t.dims4("prior field")?;
        let hw = h * w;
        for bi in 0..b {
            for p in 0..hw {
                let mut sum = 0.0;
                for ch in 0..c {
                    let v = t.data()[(bi * c + ch) * hw + p].to_f64_lossless();
                    if v < -SIMPLEX_TOLERANCE {
                        return Err(DiffusionError::InvalidPrior(format!("negative probability {v}")));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                    return Err(DiffusionError::InvalidPrior(format!("channel sum {sum} at batch {bi}, pixel {p}")));
                }
            }
        }
        Ok(Self(t))
    }

    /// `1 / C` everywhere: the prior of the vanilla (no prior guidance) model.
    pub fn uniform(batch: usize, classes: usize, h: usize, w: usize) -> Self {
        Self(Tensor::full(&[batch, classes, h, w], T::one() / T::from_usize(classes).unwrap()))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Repeat the batch `times` times (trajectory-major).
    pub fn repeat_batch(&self, times: usize) -> Self {
        Self(self.0.repeat_batch(times))
    }
}

/// Per-pixel argmax over channels of `[B, C, H, W]`; ties go to the lowest
/// class index.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let (b, c, h, w) = t.dims4("argmax").expect("rank-4 field");
    let hw = h * w;
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = t.data()[bi * c * hw + p];
            for ch in 1..c {
                let v = t.data()[(bi * c + ch) * hw + p];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
