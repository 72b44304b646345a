//! Procedural ambiguous-segmentation benchmark: blurred blobs on a smooth
//! background, labelled by several simulated raters whose boundaries wander
//! inside a known band, plus the `PGRDDATA` container.

mod generate;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{generate_case, two_mode_fixture, Case, CaseSpec, TwoModeFixture};

use crate::diffusion::LabelField;
use crate::framing::{self, FrameError};
use crate::ndgrad::{Real, Tensor};
use crate::rng::Stream;

pub const DATA_MAGIC: &[u8; 8] = b"PGRDDATA";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid data spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// A whole benchmark: case `i` is generated from a seed derived from
/// `(seed, i)`, so any case can be regenerated on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub cases: usize,
    /// Trailing cases held out for evaluation.
    pub test_cases: usize,
    pub seed: u64,
    /// Per-case settings; its own `seed` is replaced for each case.
    pub case: CaseSpec,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            cases: 200,
            test_cases: 40,
            seed: 0,
            case: CaseSpec::default(),
        }
    }
}

impl DataSpec {
    pub fn case_spec(&self, index: usize) -> CaseSpec {
        let mut s = Stream::new(self.seed, "dataset").derive_index("case", index as u64);
        CaseSpec {
            seed: rand::RngCore::next_u64(&mut s),
            ..self.case.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.case.validate()?;
        if self.cases == 0 || self.test_cases >= self.cases {
            return Err(SynthError::Spec(format!(
                "need at least one training case: {} cases with {} held out",
                self.cases, self.test_cases
            )));
        }
        Ok(())
    }
}

/// Images `[N, H, W]` as `f32` and rater labels `[N, R, H, W]` as class
/// indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub raters: usize,
    pub cases: Vec<Case>,
    /// Generator settings, when known.
    pub spec: Option<DataSpec>,
}

#[derive(Serialize, Deserialize)]
struct Offsets {
    images: usize,
    labels: usize,
}

#[derive(Serialize, Deserialize)]
struct DataHeader {
    count: usize,
    height: usize,
    width: usize,
    classes: usize,
    raters: usize,
    dtype: String,
    offsets: Offsets,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<DataSpec>,
}

pub fn generate(spec: &DataSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let cases = (0..spec.cases)
        .map(|i| generate_case(&spec.case_spec(i)))
        .collect::<Result<_, _>>()?;
    Ok(Dataset {
        height: spec.case.size,
        width: spec.case.size,
        classes: spec.case.classes,
        raters: spec.case.raters,
        cases,
        spec: Some(spec.clone()),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Case indices used for training and for evaluation.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let test = self.spec.as_ref().map_or(0, |s| s.test_cases).min(self.len());
        let cut = self.len() - test;
        ((0..cut).collect(), (cut..self.len()).collect())
    }

    /// Image batch `[B, 1, H, W]`.
    pub fn images<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let hw = self.pixels();
        Tensor::from_fn(&[indices.len(), 1, self.height, self.width], |i| {
            T::of(f64::from(self.cases[indices[i / hw]].image[i % hw]))
        })
    }

    /// One-hot labels of rater `raters[k]` for case `indices[k]`.
    pub fn labels<T: Real>(&self, indices: &[usize], raters: &[usize]) -> LabelField<T> {
        let idx: Vec<u8> = indices
            .iter()
            .zip(raters)
            .flat_map(|(&c, &r)| self.cases[c].raters[r].iter().copied())
            .collect();
        LabelField::from_indices(&idx, indices.len(), self.classes, self.height, self.width)
            .expect("stored labels are valid class indices")
    }

    pub fn encode(&self) -> Vec<u8> {
        let image_bytes = self.len() * self.pixels() * 4;
        let header = DataHeader {
            count: self.len(),
            height: self.height,
            width: self.width,
            classes: self.classes,
            raters: self.raters,
            dtype: "f32".into(),
            offsets: Offsets {
                images: 0,
                labels: image_bytes,
            },
            spec: self.spec.clone(),
        };
        let mut payload = Vec::with_capacity(image_bytes + self.len() * self.raters * self.pixels());
        for c in &self.cases {
            for &v in &c.image {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        for c in &self.cases {
            for r in &c.raters {
                payload.extend_from_slice(r);
            }
        }
        framing::write_frame(DATA_MAGIC, &serde_json::to_value(header).expect("header serializes"), &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SynthError> {
        let (header, payload) = framing::read_frame(DATA_MAGIC, bytes)?;
        let h: DataHeader = serde_json::from_value(header).map_err(FrameError::Header)?;
        if h.dtype != "f32" {
            return Err(FrameError::Invalid(format!("unsupported image dtype {}", h.dtype)).into());
        }
        let hw = h.height * h.width;
        let image_bytes = h.count * hw * 4;
        let label_bytes = h.count * h.raters * hw;
        let base = framing::payload_start(bytes);
        if h.offsets.images != 0 || h.offsets.labels != image_bytes {
            return Err(FrameError::Invalid(format!(
                "offsets ({}, {}) disagree with {} cases of {}x{}",
                h.offsets.images, h.offsets.labels, h.count, h.height, h.width
            ))
            .into());
        }
        if payload.len() != image_bytes + label_bytes {
            let what = format!(
                "{} cases need {} payload bytes, found {}",
                h.count,
                image_bytes + label_bytes,
                payload.len()
            );
            return Err(if payload.len() < image_bytes + label_bytes {
                FrameError::Truncated {
                    offset: base + payload.len(),
                    what,
                }
            } else {
                FrameError::Invalid(what)
            }
            .into());
        }
        let (images, labels) = payload.split_at(image_bytes);
        let mut cases = Vec::with_capacity(h.count);
        for i in 0..h.count {
            let image = images[i * hw * 4..(i + 1) * hw * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let raters = (0..h.raters)
                .map(|r| {
                    let start = (i * h.raters + r) * hw;
                    labels[start..start + hw].to_vec()
                })
                .collect::<Vec<_>>();
            if let Some(bad) = raters.iter().flatten().position(|&k| usize::from(k) >= h.classes) {
                return Err(FrameError::Invalid(format!(
                    "label byte at payload offset {} exceeds class count {}",
                    image_bytes + i * h.raters * hw + bad,
                    h.classes
                ))
                .into());
            }
            cases.push(Case { image, raters });
        }
        Ok(Self {
            height: h.height,
            width: h.width,
            classes: h.classes,
            raters: h.raters,
            cases,
            spec: h.spec,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        std::fs::write(path, self.encode()).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let bytes = std::fs::read(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    /// Single-case dataset holding the two-mode fixture.
    pub fn from_fixture(f: &TwoModeFixture) -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 2,
            raters: f.case.raters.len(),
            cases: vec![f.case.clone()],
            spec: None,
        }
    }
}
