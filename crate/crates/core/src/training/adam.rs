use crate::ndgrad::{Real, Tensor};

/// Adaptive-moment optimizer without weight decay. Moments are kept in the
/// parameter precision; bias correction is applied to the step size.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, params: &[Tensor<T>]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. A `None` gradient leaves that tensor and its moments
    /// untouched, so heads unused in a step do not drift on stale momentum.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.step += 1;
        let k = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(k);
        let c2 = 1.0 - self.beta2.powi(k);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (a1, a2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + a1 * gj;
                *vj = b2 * *vj + a2 * gj * gj;
                *pj -= step * *mj / (vj.sqrt() + eps);
            }
        }
    }
}
