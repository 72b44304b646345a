use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::framing::{self, FrameError};
use crate::ndgrad::{softmax_channels, Real, Tensor};
use crate::nets::{DenoiserNet, PriorNet};
use crate::rng::Stream;
use crate::schedule::{Schedule, ScheduleSpec};

use super::fields::{argmax_channels, PriorField};
use super::process::{clean_estimate, reverse_mean, reverse_step_with, DiffusionState, InjectionCounter, PosteriorMode, Sampler};
use super::DiffusionError;

pub const SAMPLE_MAGIC: &[u8; 8] = b"PGRDSMPL";

/// Anything that predicts `v` for a batch of states.
pub trait VPredictor<T: Real> {
    fn classes(&self) -> usize;

    /// `ts[i]` is the step of batch item `i`.
    fn predict_v(&self, s_t: &Tensor<T>, x: &Tensor<T>, prior: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>, DiffusionError>;
}

/// Items per denoiser call during sampling; bounds activation memory.
const PREDICT_CHUNK: usize = 32;

impl<T: Real> VPredictor<T> for DenoiserNet<T> {
    fn classes(&self) -> usize {
        self.arch().classes
    }

    fn predict_v(&self, s_t: &Tensor<T>, x: &Tensor<T>, prior: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>, DiffusionError> {
        let n = s_t.shape().first().copied().unwrap_or(0);
        if n <= PREDICT_CHUNK {
            return Ok(self.predict(s_t, x, prior, ts)?);
        }
        let slice = |t: &Tensor<T>, lo: usize, hi: usize| {
            Tensor::stack(&(lo..hi).map(|i| t.batch_item(i)).collect::<Vec<_>>())
        };
        let mut parts = Vec::new();
        for lo in (0..n).step_by(PREDICT_CHUNK) {
            let hi = (lo + PREDICT_CHUNK).min(n);
            parts.push(self.predict(&slice(s_t, lo, hi)?, &slice(x, lo, hi)?, &slice(prior, lo, hi)?, &ts[lo..hi])?);
        }
        Ok(Tensor::stack(&parts)?)
    }
}

/// Returns the exact `v` for known labels. Batch item `n` is paired with
/// label `n % B`, matching the trajectory-major layout used by [`sample`].
#[derive(Clone, Debug)]
pub struct OracleDenoiser<T> {
    labels: Tensor<T>,
    schedule: Schedule,
}

impl<T: Real> OracleDenoiser<T> {
    pub fn new(labels: Tensor<T>, schedule: Schedule) -> Result<Self, DiffusionError> {
        labels.dims4("oracle labels")?;
        Ok(Self { labels, schedule })
    }
}

impl<T: Real> VPredictor<T> for OracleDenoiser<T> {
    fn classes(&self) -> usize {
        self.labels.shape()[1]
    }

    fn predict_v(&self, s_t: &Tensor<T>, _x: &Tensor<T>, prior: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>, DiffusionError> {
        let (n, c, h, w) = s_t.dims4("oracle state")?;
        let b = self.labels.shape()[0];
        if self.labels.shape()[1..] != [c, h, w] || n % b != 0 || ts.len() != n {
            return Err(DiffusionError::Shape(format!(
                "oracle labels {:?} cannot serve states {:?}",
                self.labels.shape(),
                s_t.shape()
            )));
        }
        s_t.expect_same_shape("oracle", prior)?;
        let inner = c * h * w;
        let mut out = Tensor::zeros(s_t.shape());
        for i in 0..n {
            let t = ts[i];
            self.schedule.check_step(t)?;
            let (a, sb) = (T::of(self.schedule.rho_bar(t).sqrt()), T::of(self.schedule.sigma_bar(t)));
            let y = &self.labels.data()[(i % b) * inner..(i % b + 1) * inner];
            let range = i * inner..(i + 1) * inner;
            for (((o, &s), &p), &yv) in out.data_mut()[range.clone()]
                .iter_mut()
                .zip(&s_t.data()[range.clone()])
                .zip(&prior.data()[range])
                .zip(y)
            {
                *o = (a * (s - p) - (yv - p)) / sb;
            }
        }
        Ok(out)
    }
}

/// Where the prior field comes from.
#[derive(Clone, Copy, Debug)]
pub enum PriorSource<'a, T> {
    /// A trained, frozen prior network.
    Net(&'a PriorNet<T>),
    /// `1 / C` everywhere; the vanilla diffusion baseline.
    Uniform,
}

impl<T: Real> PriorSource<'_, T> {
    pub fn field(&self, x: &Tensor<T>, classes: usize) -> Result<PriorField<T>, DiffusionError> {
        let (b, _, h, w) = x.dims4("image batch")?;
        match self {
            PriorSource::Net(net) => {
                if !net.is_frozen() {
                    return Err(DiffusionError::InvalidArgument("the prior network must be frozen before sampling".into()));
                }
                if net.arch().classes != classes {
                    return Err(DiffusionError::Shape(format!(
                        "prior predicts {} classes, denoiser expects {classes}",
                        net.arch().classes
                    )));
                }
                PriorField::new(net.forward(x)?)
            }
            PriorSource::Uniform => Ok(PriorField::uniform(b, classes, h, w)),
        }
    }
}

/// Reverse-chain settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub sampler: Sampler,
    /// Strictly increasing steps visited in reverse, e.g. from `uniform_subset`.
    pub steps: Vec<usize>,
    /// Trajectories per image, `M`.
    pub samples: usize,
    #[serde(default)]
    pub posterior: PosteriorMode,
}

/// Everything needed to replay a sampling run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub samples: usize,
    pub steps: Vec<usize>,
    pub sampler: Sampler,
    pub stochastic: bool,
    pub seed: u64,
    pub posterior: PosteriorMode,
    pub schedule: ScheduleSpec,
    /// Prior terms injected per trajectory; equals `steps.len()`.
    pub prior_injections: usize,
}

/// `M` decoded samples `[M, B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet<T> {
    pub meta: SampleMeta,
    pub samples: Tensor<T>,
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    dtype: String,
    shape: Vec<usize>,
    #[serde(flatten)]
    meta: SampleMeta,
}

impl<T: Real> SampleSet<T> {
    /// Sample `m` across the batch, `[B, C, H, W]`.
    pub fn sample(&self, m: usize) -> Tensor<T> {
        let shape = self.samples.shape();
        let inner: usize = shape[1..].iter().product();
        Tensor::new(&shape[1..], self.samples.data()[m * inner..(m + 1) * inner].to_vec()).expect("slice of a valid tensor")
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = SampleHeader {
            dtype: T::DTYPE.into(),
            shape: self.samples.shape().to_vec(),
            meta: self.meta.clone(),
        };
        let mut payload = Vec::with_capacity(self.samples.len() * T::BYTES);
        for &v in self.samples.data() {
            v.write_le(&mut payload);
        }
        framing::write_frame(SAMPLE_MAGIC, &serde_json::to_value(header).expect("header serializes"), &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DiffusionError> {
        let (header, payload) = framing::read_frame(SAMPLE_MAGIC, bytes)?;
        let header: SampleHeader = serde_json::from_value(header).map_err(FrameError::Header)?;
        if header.dtype != T::DTYPE {
            return Err(FrameError::Invalid(format!("sample dtype {} does not match {}", header.dtype, T::DTYPE)).into());
        }
        let n: usize = header.shape.iter().product();
        if payload.len() != n * T::BYTES {
            return Err(FrameError::Truncated {
                offset: framing::payload_start(bytes) + payload.len(),
                what: format!("{n} sample values need {} payload bytes", n * T::BYTES),
            }
            .into());
        }
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Self {
            meta: header.meta,
            samples: Tensor::new(&header.shape, data)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffusionError> {
        std::fs::write(path, self.encode()).map_err(|e| DiffusionError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DiffusionError> {
        let bytes = std::fs::read(path).map_err(|e| DiffusionError::Io(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

/// Clean estimate from one denoiser call at `state.t`.
pub fn predict_y0<T: Real, P: VPredictor<T>>(
    net: &P,
    state: &DiffusionState<T>,
    x: &Tensor<T>,
    prior: &PriorField<T>,
    sch: &Schedule,
) -> Result<Tensor<T>, DiffusionError> {
    let b = state.s.shape().first().copied().unwrap_or(0);
    let v = net.predict_v(&state.s, x, prior.tensor(), &vec![state.t; b])?;
    clean_estimate(state, &v, prior, sch)
}

fn check_steps(steps: &[usize], sch: &Schedule) -> Result<(), DiffusionError> {
    if steps.is_empty() {
        return Err(DiffusionError::InvalidArgument("empty step list".into()));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DiffusionError::InvalidArgument(format!("steps {steps:?} are not strictly increasing")));
    }
    for &t in [steps[0], steps[steps.len() - 1]].iter() {
        sch.check_step(t)?;
    }
    Ok(())
}

/// Draw `cfg.samples` trajectories per image of `x`.
///
/// Trajectory `m` owns stream `trajectory/m` of `seed`: its start noise and
/// the per-step noise `noise/t` never depend on other trajectories. The
/// prior field is computed once and enters every reverse-step mean.
pub fn sample<T: Real, P: VPredictor<T>>(
    prior: PriorSource<'_, T>,
    net: &P,
    x: &Tensor<T>,
    sch: &Schedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampleSet<T>, DiffusionError> {
    if cfg.samples < 1 {
        return Err(DiffusionError::InvalidArgument("at least one sample per image is required".into()));
    }
    check_steps(&cfg.steps, sch)?;
    let m = cfg.samples;
    let classes = net.classes();
    let pi = prior.field(x, classes)?;
    let (b, c, h, w) = pi.tensor().dims4("prior field")?;
    let item = [b, c, h, w];
    let pi_all = pi.repeat_batch(m);
    let x_all = x.repeat_batch(m);
    let root = Stream::new(seed, "sample");
    let streams: Vec<Stream> = (0..m as u64).map(|i| root.derive_index("trajectory", i)).collect();
    let draw = |name: &str, t: usize| -> Result<Tensor<T>, DiffusionError> {
        let parts: Vec<Tensor<T>> = streams
            .iter()
            .map(|s| s.derive_index(name, t as u64).normal_tensor(&item))
            .collect();
        Ok(Tensor::stack(&parts)?)
    };

    let t_start = *cfg.steps.last().expect("checked non-empty");
    let init = draw("init", t_start)?;
    let mut state = DiffusionState {
        s: pi_all.tensor().axpby(T::one(), &init, T::of(sch.sigma_bar(t_start)))?,
        t: t_start,
    };
    let mut counter = InjectionCounter::default();
    for i in (0..cfg.steps.len()).rev() {
        let t_prev = if i == 0 { 0 } else { cfg.steps[i - 1] };
        let y0 = predict_y0(net, &state, &x_all, &pi_all, sch)?;
        let mu = reverse_mean(cfg.sampler, cfg.posterior, &state, &y0, &pi_all, t_prev, sch, &mut counter)?;
        let t = state.t;
        state = reverse_step_with(&state, mu, t_prev, sch, cfg.sampler, |_| draw("noise", t))?;
    }
    debug_assert_eq!(counter.count(), cfg.steps.len());
    Ok(SampleSet {
        meta: SampleMeta {
            samples: m,
            steps: cfg.steps.clone(),
            sampler: cfg.sampler,
            stochastic: cfg.sampler.is_stochastic(),
            seed,
            posterior: cfg.posterior,
            schedule: sch.spec(),
            prior_injections: counter.count(),
        },
        samples: state.s.reshape(&[m, b, c, h, w])?,
    })
}

/// Mean of `softmax(y0 / tau_out)` over samples, and its per-pixel argmax
/// (ties to the lowest class).
pub fn aggregate<T: Real>(set: &SampleSet<T>, tau_out: f64) -> Result<(Tensor<T>, Vec<u8>), DiffusionError> {
    if !(tau_out > 0.0) {
        return Err(DiffusionError::InvalidArgument(format!("output temperature must be positive, got {tau_out}")));
    }
    let m = set.samples.shape()[0];
    if m == 0 {
        return Err(DiffusionError::InvalidArgument("empty sample set".into()));
    }
    let inv = T::of(1.0 / tau_out);
    let mut mean = Tensor::zeros(&set.samples.shape()[1..]);
    for i in 0..m {
        let p = softmax_channels(&set.sample(i).map(|v| v * inv))?;
        for (a, &v) in mean.data_mut().iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let k = T::from_usize(m).unwrap();
    for a in mean.data_mut() {
        *a = *a / k;
    }
    let mask = argmax_channels(&mean);
    Ok((mean, mask))
}
