//! Two-stage training: the prior network on cross-entropy first, then the
//! residual denoiser against a frozen prior on velocity MSE plus weighted
//! auxiliary cross-entropy.

mod adam;
mod check;
mod losses;

use std::fmt::Write as _;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::Adam;
pub use check::check_objective;
pub use losses::{combine, loss_dds, loss_total, loss_vel};

use crate::diffusion::{q_sample, v_target, DiffusionError, LabelField, PriorField, PriorSource};
use crate::ndgrad::{Graph, NdError, NodeId, Real, Tensor};
use crate::nets::{Bound, DenoiserArch, DenoiserNet, NetError, PriorArch, PriorNet};
use crate::rng::Stream;
use crate::schedule::Schedule;
use crate::synthdata::Dataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    /// Non-finite loss or parameters. `last_good` is the encoded checkpoint
    /// from before the failing update.
    #[error("{stage} training diverged at step {step}: {reason}")]
    Diverged {
        stage: &'static str,
        step: usize,
        reason: String,
        last_good: Vec<u8>,
    },
}

impl TrainError {
    /// Numeric failures map to their own exit status in the CLI.
    pub fn is_numeric(&self) -> bool {
        matches!(self, TrainError::Diverged { .. })
    }

    /// Overflow caught inside the graph, however deeply wrapped.
    fn overflow(&self) -> Option<&NdError> {
        let nd = match self {
            TrainError::Nd(e) | TrainError::Net(NetError::Nd(e)) => e,
            TrainError::Diffusion(DiffusionError::Nd(e)) | TrainError::Diffusion(DiffusionError::Net(NetError::Nd(e))) => e,
            _ => return None,
        };
        matches!(nd, NdError::NonFinite { .. }).then_some(nd)
    }

    /// Turn graph overflow into a divergence report carrying `last_good`.
    fn or_diverged(self, stage: &'static str, step: usize, last_good: impl FnOnce() -> Vec<u8>) -> Self {
        match self.overflow() {
            Some(e) => TrainError::Diverged {
                stage,
                step,
                reason: e.to_string(),
                last_good: last_good(),
            },
            None => self,
        }
    }
}

/// Where the auxiliary supervision comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DdsMode {
    /// One extra forward per update at a step drawn from the supervised set;
    /// its cross-entropy is scaled by the set size so the expectation equals
    /// the sum over all heads.
    #[default]
    Sampled,
    /// Only the training forward itself, and only when every batch item drew
    /// the same supervised step. Almost never fires for large `T`.
    DrawnOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the auxiliary loss.
    pub lambda: f64,
    /// Supervised steps.
    pub dds_steps: Vec<usize>,
    /// Temperature of the auxiliary softmax.
    pub tau: f64,
    pub dds_mode: DdsMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on prior updates; the plateau rule may stop earlier.
    pub prior_steps: usize,
    pub denoiser_steps: usize,
    /// Stage 1 stops once the mean loss of the latest window improves on the
    /// previous window by less than `plateau_tolerance`, relatively.
    pub plateau_window: usize,
    pub plateau_tolerance: f64,
    pub seed: u64,
    /// Replace the learned prior with the uniform field.
    pub no_pgr: bool,
    /// Drop the auxiliary heads and their loss.
    pub no_dds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            dds_steps: crate::nets::default_dds_steps(1000),
            tau: 1.0,
            dds_mode: DdsMode::Sampled,
            learning_rate: 1e-3,
            batch_size: 2,
            prior_steps: 1500,
            denoiser_steps: 3000,
            plateau_window: 200,
            plateau_tolerance: 0.01,
            seed: 0,
            no_pgr: false,
            no_dds: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, total_steps: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !self.no_dds {
            if !(self.lambda > 0.0) {
                return bad(format!("auxiliary weight {} must be positive", self.lambda));
            }
            if self.dds_steps.is_empty() {
                return bad("the supervised step set is empty".into());
            }
            if let Some(t) = self.dds_steps.iter().find(|&&t| t == 0 || t > total_steps) {
                return bad(format!("supervised step {t} outside 1..={total_steps}"));
            }
            if !(self.tau > 0.0) {
                return bad(format!("temperature {} must be positive", self.tau));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.plateau_window == 0 || !(self.plateau_tolerance >= 0.0) {
            return bad("plateau window must be positive and tolerance non-negative".into());
        }
        Ok(())
    }

    /// The denoiser architecture this config trains: auxiliary heads follow
    /// the supervised set, and vanish under `no_dds`.
    pub fn denoiser_arch(&self, base: &DenoiserArch) -> DenoiserArch {
        DenoiserArch {
            dds_steps: if self.no_dds { Vec::new() } else { self.dds_steps.clone() },
            tau: self.tau,
            ..base.clone()
        }
    }

    pub fn prior_init_seed(&self) -> u64 {
        Stream::new(self.seed, "init").derive("prior").next_u64()
    }

    pub fn denoiser_init_seed(&self) -> u64 {
        Stream::new(self.seed, "init").derive("denoiser").next_u64()
    }
}

/// Case and rater of each batch item at a given update. Each epoch visits
/// every training case once in a seeded order; the rater providing the label
/// is drawn per (epoch, case).
pub fn batch_items(seed: u64, stage: &str, train: &[usize], raters: usize, batch: usize, step: usize) -> Vec<(usize, usize)> {
    let root = Stream::new(seed, stage);
    let n = train.len();
    (0..batch)
        .map(|i| {
            let pos = step * batch + i;
            let epoch = root.derive_index("epoch", (pos / n) as u64);
            let mut order = train.to_vec();
            epoch.derive("order").shuffle(&mut order);
            let case = order[pos % n];
            let rater = epoch.derive_index("rater", case as u64).range_inclusive(0, raters as u64 - 1) as usize;
            (case, rater)
        })
        .collect()
}

fn gather<T: Real>(data: &Dataset, items: &[(usize, usize)]) -> (Tensor<T>, LabelField<T>) {
    let cases: Vec<usize> = items.iter().map(|&(c, _)| c).collect();
    let raters: Vec<usize> = items.iter().map(|&(_, r)| r).collect();
    (data.images(&cases), data.labels(&cases, &raters))
}

fn check_split(train: &[usize], data: &Dataset) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::Config("no training cases".into()));
    }
    if let Some(&c) = train.iter().find(|&&c| c >= data.len()) {
        return Err(TrainError::Config(format!("case {c} outside a dataset of {}", data.len())));
    }
    Ok(())
}

fn all_finite<T: Real>(ts: &[Tensor<T>]) -> bool {
    ts.iter().all(Tensor::all_finite)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTraceRow {
    pub step: usize,
    pub loss: f64,
}

pub struct PriorRun<T> {
    /// Frozen after training.
    pub net: PriorNet<T>,
    pub trace: Vec<PriorTraceRow>,
    pub plateaued: bool,
}

/// Whether the latest full window failed to improve on the one before.
fn plateaued(trace: &[PriorTraceRow], window: usize, tolerance: f64) -> bool {
    let n = trace.len();
    if n < 2 * window || n % window != 0 {
        return false;
    }
    let mean = |rows: &[PriorTraceRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let prev = mean(&trace[n - 2 * window..n - window]);
    let cur = mean(&trace[n - window..]);
    (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < tolerance
}

/// Stage 1: cross-entropy between prior logits and a randomly chosen rater.
pub fn train_prior<T: Real>(
    mut net: PriorNet<T>,
    data: &Dataset,
    train: &[usize],
    cfg: &TrainConfig,
) -> Result<PriorRun<T>, TrainError> {
    check_split(train, data)?;
    if cfg.learning_rate <= 0.0 || cfg.batch_size == 0 || cfg.plateau_window == 0 {
        return Err(TrainError::Config("learning rate, batch size and plateau window must be positive".into()));
    }
    if net.arch().classes != data.classes {
        return Err(TrainError::Config(format!(
            "prior predicts {} classes, data has {}",
            net.arch().classes,
            data.classes
        )));
    }
    let Some(params) = net.params_mut() else {
        return Err(TrainError::Config("prior is already frozen".into()));
    };
    let mut opt = Adam::new(cfg.learning_rate, params.tensors());
    let mut trace = Vec::with_capacity(cfg.prior_steps);
    let mut stopped = false;
    for step in 0..cfg.prior_steps {
        let items = batch_items(cfg.seed, "prior/batches", train, data.raters, cfg.batch_size, step);
        let (x, y) = gather::<T>(data, &items);
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true)?;
        let recorded = (|| -> Result<NodeId, TrainError> {
            let xi = g.constant(x)?;
            let yi = g.constant(y.into_tensor())?;
            let logits = net.logits(&mut g, &bound, xi)?;
            Ok(g.cross_entropy(logits, yi)?)
        })();
        let loss = recorded.map_err(|e| e.or_diverged("prior", step, || net.to_checkpoint().encode()))?;
        let value = g.value(loss).item().to_f64_lossless();
        if !value.is_finite() {
            return Err(TrainError::Diverged {
                stage: "prior",
                step,
                reason: format!("loss is {value}"),
                last_good: net.to_checkpoint().encode(),
            });
        }
        let grads = g
            .backward(loss)
            .map_err(|e| TrainError::from(e).or_diverged("prior", step, || net.to_checkpoint().encode()))?;
        let slots: Vec<Option<&Tensor<T>>> = bound.ids.iter().map(|&id| grads.get(id)).collect();
        let params = net.params_mut().expect("checked unfrozen");
        let before = params.clone();
        opt.update(params.tensors_mut(), &slots);
        if !all_finite(params.tensors()) {
            *params = before;
            return Err(TrainError::Diverged {
                stage: "prior",
                step,
                reason: "non-finite parameters after update".into(),
                last_good: net.to_checkpoint().encode(),
            });
        }
        trace.push(PriorTraceRow { step, loss: value });
        if plateaued(&trace, cfg.plateau_window, cfg.plateau_tolerance) {
            stopped = true;
            break;
        }
    }
    Ok(PriorRun {
        net: net.freeze(),
        trace,
        plateaued: stopped,
    })
}

/// Everything one denoiser update consumes. Items may carry different steps.
#[derive(Clone, Debug)]
pub struct PgrdBatch<T> {
    pub x: Tensor<T>,
    pub y: LabelField<T>,
    pub prior: PriorField<T>,
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
    /// Step and noise of the extra auxiliary forward, shared by the batch.
    pub dds: Option<(usize, Tensor<T>)>,
}

/// Loss nodes recorded for one batch.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub vel: NodeId,
    pub dds: Option<NodeId>,
    pub total: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgrdTraceRow {
    pub step: usize,
    pub l_vel: f64,
    /// Absent when auxiliary supervision is disabled.
    pub l_dds: Option<f64>,
    pub l_total: f64,
}

fn item<T: Real>(t: &Tensor<T>, b: usize) -> Tensor<T> {
    t.batch_item(b)
}

/// Noisy states and velocity targets for per-item steps.
fn noisy_inputs<T: Real>(batch: &PgrdBatch<T>, sch: &Schedule) -> Result<(Tensor<T>, Tensor<T>), TrainError> {
    let mut states = Vec::with_capacity(batch.ts.len());
    let mut targets = Vec::with_capacity(batch.ts.len());
    for (b, &t) in batch.ts.iter().enumerate() {
        let y = LabelField::new(item(batch.y.tensor(), b))?;
        let p = PriorField::new(item(batch.prior.tensor(), b))?;
        let eps = item(&batch.eps, b);
        states.push(q_sample(&y, &p, t, &eps, sch)?.s);
        let r0 = y.tensor().sub(p.tensor())?;
        targets.push(v_target(&r0, &eps, t, sch)?);
    }
    Ok((Tensor::stack(&states)?, Tensor::stack(&targets)?))
}

/// Record the full training objective for `batch` on `g`.
pub fn record_loss<T: Real>(
    g: &mut Graph<T>,
    net: &DenoiserNet<T>,
    bound: &Bound,
    batch: &PgrdBatch<T>,
    sch: &Schedule,
    cfg: &TrainConfig,
) -> Result<LossNodes, TrainError> {
    let (s_t, v) = noisy_inputs(batch, sch)?;
    let x = g.constant(batch.x.clone())?;
    let prior = g.constant(batch.prior.tensor().clone())?;
    let y = g.constant(batch.y.tensor().clone())?;
    let s = g.constant(s_t)?;
    let v = g.constant(v)?;
    let out = net.forward(g, bound, s, x, prior, &batch.ts)?;
    let vel = loss_vel(g, out.v, v)?;
    let dds = if cfg.no_dds {
        None
    } else {
        match (cfg.dds_mode, &batch.dds) {
            (DdsMode::Sampled, Some((t, eps))) => {
                let state = q_sample(&batch.y, &batch.prior, *t, eps, sch)?;
                let s = g.constant(state.s)?;
                let ts = vec![*t; batch.ts.len()];
                let extra = net.forward(g, bound, s, x, prior, &ts)?;
                let ce = loss_dds(g, &extra.aux, y, cfg.tau, &cfg.dds_steps)?;
                Some(g.scale(ce, cfg.dds_steps.len() as f64)?)
            }
            (DdsMode::Sampled, None) => {
                return Err(TrainError::Config("sampled auxiliary supervision needs an extra step and noise".into()))
            }
            (DdsMode::DrawnOnly, _) if out.aux.is_empty() => None,
            (DdsMode::DrawnOnly, _) => Some(loss_dds(g, &out.aux, y, cfg.tau, &cfg.dds_steps)?),
        }
    };
    let total = loss_total(g, vel, dds, cfg.lambda)?;
    Ok(LossNodes { vel, dds, total })
}

/// Random draws of the main path at one update; they depend only on the
/// seed and the step, never on the ablation flags.
pub fn main_draws<T: Real>(cfg: &TrainConfig, step: usize, shape: &[usize], total_steps: usize) -> (Vec<usize>, Tensor<T>) {
    let root = Stream::new(cfg.seed, "denoiser").derive_index("step", step as u64);
    let mut ts = root.derive("t");
    let ts = (0..shape[0]).map(|_| ts.range_inclusive(1, total_steps as u64) as usize).collect();
    (ts, root.derive("eps").normal_tensor(shape))
}

fn dds_draws<T: Real>(cfg: &TrainConfig, step: usize, shape: &[usize]) -> (usize, Tensor<T>) {
    let mut s = Stream::new(cfg.seed, "denoiser").derive_index("step", step as u64).derive("dds");
    let t = cfg.dds_steps[s.range_inclusive(0, cfg.dds_steps.len() as u64 - 1) as usize];
    (t, s.normal_tensor(shape))
}

/// Optimizer state of stage 2, usable one batch at a time.
pub struct PgrdTrainer<'s, T> {
    pub net: DenoiserNet<T>,
    opt: Adam<T>,
    sch: &'s Schedule,
    cfg: TrainConfig,
}

impl<'s, T: Real> PgrdTrainer<'s, T> {
    pub fn new(net: DenoiserNet<T>, sch: &'s Schedule, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate(sch.steps())?;
        if net.arch().steps != sch.steps() {
            return Err(TrainError::Config(format!(
                "denoiser built for {} steps, schedule has {}",
                net.arch().steps,
                sch.steps()
            )));
        }
        if !cfg.no_dds {
            if let Some(t) = cfg.dds_steps.iter().find(|t| !net.arch().dds_steps.contains(t)) {
                return Err(TrainError::Config(format!("supervised step {t} has no auxiliary head")));
            }
        }
        let opt = Adam::new(cfg.learning_rate, net.params().tensors());
        Ok(Self { net, opt, sch, cfg })
    }

    /// One optimizer update; returns the losses measured before it.
    pub fn step_on(&mut self, batch: &PgrdBatch<T>, step: usize) -> Result<PgrdTraceRow, TrainError> {
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, true)?;
        let nodes = record_loss(&mut g, &self.net, &bound, batch, self.sch, &self.cfg)
            .map_err(|e| e.or_diverged("denoiser", step, || self.net.to_checkpoint().encode()))?;
        let scalar = |id: NodeId| g.value(id).item().to_f64_lossless();
        let row = PgrdTraceRow {
            step,
            l_vel: scalar(nodes.vel),
            l_dds: if self.cfg.no_dds { None } else { Some(nodes.dds.map_or(0.0, scalar)) },
            l_total: scalar(nodes.total),
        };
        if !row.l_total.is_finite() {
            return Err(TrainError::Diverged {
                stage: "denoiser",
                step,
                reason: format!("loss is {}", row.l_total),
                last_good: self.net.to_checkpoint().encode(),
            });
        }
        let grads = g
            .backward(nodes.total)
            .map_err(|e| TrainError::from(e).or_diverged("denoiser", step, || self.net.to_checkpoint().encode()))?;
        let slots: Vec<Option<&Tensor<T>>> = bound.ids.iter().map(|&id| grads.get(id)).collect();
        let before = self.net.params().clone();
        self.opt.update(self.net.params_mut().tensors_mut(), &slots);
        if !all_finite(self.net.params().tensors()) {
            *self.net.params_mut() = before;
            return Err(TrainError::Diverged {
                stage: "denoiser",
                step,
                reason: "non-finite parameters after update".into(),
                last_good: self.net.to_checkpoint().encode(),
            });
        }
        Ok(row)
    }
}

pub struct PgrdRun<T> {
    pub net: DenoiserNet<T>,
    pub trace: Vec<PgrdTraceRow>,
}

/// The prior field source for stage 2 and for sampling: the frozen network,
/// or the uniform field under `no_pgr`.
pub fn prior_source<'a, T: Real>(prior: Option<&'a PriorNet<T>>, cfg: &TrainConfig) -> Result<PriorSource<'a, T>, TrainError> {
    match (cfg.no_pgr, prior) {
        (true, _) => Ok(PriorSource::Uniform),
        (false, Some(net)) if net.is_frozen() => Ok(PriorSource::Net(net)),
        (false, Some(_)) => Err(TrainError::Config("the prior must be frozen before stage 2".into())),
        (false, None) => Err(TrainError::Config("a trained prior is required unless no_pgr is set".into())),
    }
}

/// Stage 2: train a fresh denoiser against the frozen `prior`, or against
/// the uniform field when `cfg.no_pgr` is set.
pub fn train_pgrd<T: Real>(
    net: DenoiserNet<T>,
    prior: Option<&PriorNet<T>>,
    data: &Dataset,
    train: &[usize],
    sch: &Schedule,
    cfg: &TrainConfig,
) -> Result<PgrdRun<T>, TrainError> {
    check_split(train, data)?;
    let prior = prior_source(prior, cfg)?;
    let classes = net.arch().classes;
    if classes != data.classes {
        return Err(TrainError::Config(format!("denoiser predicts {classes} classes, data has {}", data.classes)));
    }
    let mut trainer = PgrdTrainer::new(net, sch, cfg.clone())?;
    let shape = [cfg.batch_size, classes, data.height, data.width];
    let mut trace = Vec::with_capacity(cfg.denoiser_steps);
    for step in 0..cfg.denoiser_steps {
        let items = batch_items(cfg.seed, "denoiser/batches", train, data.raters, cfg.batch_size, step);
        let (x, y) = gather::<T>(data, &items);
        let prior_field = prior.field(&x, classes)?;
        let (ts, eps) = main_draws(cfg, step, &shape, sch.steps());
        let dds = (!cfg.no_dds && cfg.dds_mode == DdsMode::Sampled).then(|| dds_draws(cfg, step, &shape));
        let batch = PgrdBatch {
            x,
            y,
            prior: prior_field,
            ts,
            eps,
            dds,
        };
        trace.push(trainer.step_on(&batch, step)?);
    }
    Ok(PgrdRun { net: trainer.net, trace })
}

/// CSV with header `step,loss`.
pub fn prior_trace_csv(trace: &[PriorTraceRow]) -> String {
    let mut out = String::from("step,loss\n");
    for r in trace {
        writeln!(out, "{},{}", r.step, r.loss).expect("writing to a String");
    }
    out
}

/// CSV with header `step,l_vel,l_dds,l_total`; the `l_dds` column is
/// omitted entirely when no row carries it.
pub fn pgrd_trace_csv(trace: &[PgrdTraceRow]) -> String {
    let with_dds = trace.iter().any(|r| r.l_dds.is_some());
    let mut out = String::from(if with_dds { "step,l_vel,l_dds,l_total\n" } else { "step,l_vel,l_total\n" });
    for r in trace {
        match r.l_dds {
            Some(d) if with_dds => writeln!(out, "{},{},{},{}", r.step, r.l_vel, d, r.l_total),
            _ if with_dds => writeln!(out, "{},{},,{}", r.step, r.l_vel, r.l_total),
            _ => writeln!(out, "{},{},{}", r.step, r.l_vel, r.l_total),
        }
        .expect("writing to a String");
    }
    out
}

/// A fresh prior sized for `data`.
pub fn fresh_prior<T: Real>(data: &Dataset, cfg: &TrainConfig) -> Result<PriorNet<T>, TrainError> {
    Ok(PriorNet::new(
        PriorArch {
            classes: data.classes,
            ..PriorArch::default()
        },
        cfg.prior_init_seed(),
    )?)
}
