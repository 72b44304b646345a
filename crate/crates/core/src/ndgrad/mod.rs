//! Dense real tensors, a fixed set of differentiable operations recorded on a
//! [`Graph`], reverse-mode gradients, and a finite-difference checker.
//!
//! The op set is deliberately closed: it is exactly what the prior network
//! and the denoising U-Net need, which keeps [`grad_check`] exhaustive.

mod checkpoint;
mod gradcheck;
mod graph;
mod ops;
mod suite;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, TensorEntry, MAGIC as CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, LeafReport, FD_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{log_softmax_channels, softmax_channels, Op};
pub use suite::{check_all_ops, OpCheck, ALL_OPS};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    BadShape { shape: Vec<usize>, reason: &'static str },
    #[error("{op}: non-finite value in {stage}")]
    NonFinite { op: &'static str, stage: &'static str },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}
