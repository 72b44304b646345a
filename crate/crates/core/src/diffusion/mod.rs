//! Prior-drift forward process on residuals `s_t - prior`, the `v`
//! rotation and its inverse, reverse-step means with the prior injected at
//! every step, and multi-sample reverse chains.

mod fields;
mod process;
mod sample;

pub use fields::{argmax_channels, LabelField, PriorField, SIMPLEX_TOLERANCE};
pub use process::{
    clean_estimate, ddim_mean, posterior_mean, q_sample, q_step, recover, reverse_mean, reverse_step, reverse_step_with,
    transition_mean, v_target, DiffusionState, ForwardForm, InjectionCounter, PosteriorMode, Sampler,
};
pub use sample::{
    aggregate, predict_y0, sample, OracleDenoiser, PriorSource, SampleMeta, SampleSet, SamplerConfig, VPredictor,
    SAMPLE_MAGIC,
};

use thiserror::Error;

use crate::framing::FrameError;
use crate::ndgrad::NdError;
use crate::nets::NetError;
use crate::schedule::ScheduleError;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid label field: {0}")]
    InvalidLabel(String),
    #[error("invalid prior field: {0}")]
    InvalidPrior(String),
    #[error("reverse chain already at step 0")]
    Exhausted,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
}
