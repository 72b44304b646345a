//! The two networks: a coarse prior predictor and the residual denoiser with
//! auxiliary supervision heads. Both checkpoint to the `PGRDCKPT` format with
//! their architecture descriptor in the header.

mod denoiser;
mod params;
mod prior;

use std::path::Path;

pub use denoiser::{default_dds_steps, time_embedding, DenoiserArch, DenoiserNet, DenoiserOutput};
pub use params::{Bound, ParamSet};
pub use prior::{PriorArch, PriorNet};

use thiserror::Error;

use crate::ndgrad::{Checkpoint, CheckpointError, NdError, Real, Tensor};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("{0}")]
    Architecture(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub(crate) fn expect_dims<T: Real>(
    t: &Tensor<T>,
    what: &str,
    channels: Option<usize>,
) -> Result<(usize, usize, usize, usize), NetError> {
    let dims = t
        .dims4("network input")
        .map_err(|_| NetError::Shape(format!("{what} must be [B, C, H, W], got {:?}", t.shape())))?;
    if let Some(c) = channels {
        if dims.1 != c {
            return Err(NetError::Shape(format!("{what} has {} channels, expected {c}", dims.1)));
        }
    }
    Ok(dims)
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<(), NetError> {
    std::fs::write(path, ck.encode()).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, NetError> {
    let bytes = std::fs::read(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Checkpoint::decode(&bytes)?)
}
