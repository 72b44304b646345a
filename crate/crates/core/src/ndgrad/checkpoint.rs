//! `PGRDCKPT` files: framed JSON header naming each tensor, followed by the
//! raw little-endian parameter payload.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::{Real, Tensor};
use crate::framing::{self, FrameError};

pub const MAGIC: &[u8; 8] = b"PGRDCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("checkpoint dtype {found} does not match model dtype {expected}")]
    Dtype { expected: String, found: String },
    #[error("tensor {name:?} truncated: needs bytes {start}..{end} of payload, have {available}")]
    Truncated {
        name: String,
        start: usize,
        end: usize,
        available: usize,
    },
    #[error("tensor {name:?} missing from checkpoint")]
    Missing { name: String },
    #[error("tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length in the payload.
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: architecture descriptor plus named tensors in file
/// order.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub arch: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for &v in t.data() {
                v.write_le(&mut payload);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes: payload.len() - offset,
            });
        }
        let header = CheckpointHeader {
            dtype: T::DTYPE.to_owned(),
            arch: self.arch.clone(),
            tensors: entries,
        };
        framing::write_frame(
            MAGIC,
            &serde_json::to_value(&header).expect("header serializes"),
            &payload,
        )
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (header, payload) = framing::read_frame(MAGIC, bytes)?;
        let header: CheckpointHeader = serde_json::from_value(header).map_err(FrameError::from)?;
        if header.dtype != T::DTYPE {
            return Err(CheckpointError::Dtype {
                expected: T::DTYPE.into(),
                found: header.dtype,
            });
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            let end = e.offset + e.bytes;
            if e.bytes != count * T::BYTES || end > payload.len() {
                return Err(CheckpointError::Truncated {
                    name: e.name,
                    start: e.offset,
                    end,
                    available: payload.len(),
                });
            }
            let data = payload[e.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| FrameError::Invalid(format!("tensor {:?}: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            arch: header.arch,
            tensors,
        })
    }

    /// Take the tensors named by `expected` (name, shape) in that order,
    /// rejecting any absent or mis-shaped entry.
    pub fn take_matching(mut self, expected: &[(String, Vec<usize>)]) -> Result<Vec<Tensor<T>>, CheckpointError> {
        let mut out = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let pos = self
                .tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| CheckpointError::Missing { name: name.clone() })?;
            let (_, t) = self.tensors.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            out.push(t);
        }
        Ok(out)
    }
}
