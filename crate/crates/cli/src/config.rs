//! The run configuration: one JSON document that pins every numeric output
//! of every command.

use std::path::{Path, PathBuf};

use pgrd::diffusion::{PosteriorMode, Sampler, SamplerConfig};
use pgrd::nets::{DenoiserArch, PriorArch};
use pgrd::schedule::{uniform_subset, ScheduleSpec};
use pgrd::synthdata::DataSpec;
use pgrd::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Reverse-chain settings used by `sample`, `eval` and `bench-steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    #[serde(rename = "type")]
    pub kind: Sampler,
    /// Reverse steps, an evenly spaced subset of `1..=T`.
    #[serde(rename = "S")]
    pub steps: usize,
    /// Trajectories per image.
    #[serde(rename = "M")]
    pub samples: usize,
    /// Temperature of the softmax applied to each sample before averaging.
    pub tau_out: f64,
    pub posterior: PosteriorMode,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: Sampler::Ddim,
            steps: 50,
            samples: 8,
            tau_out: 0.25,
            posterior: PosteriorMode::Centered,
        }
    }
}

impl SamplerSpec {
    pub fn config(&self, total_steps: usize) -> Result<SamplerConfig, CliError> {
        if self.steps > total_steps {
            return Err(CliError::Usage(format!("{} sampling steps exceed T = {total_steps}", self.steps)));
        }
        Ok(SamplerConfig {
            sampler: self.kind,
            steps: uniform_subset(total_steps, self.steps)?,
            samples: self.samples,
            posterior: self.posterior,
        })
    }
}

/// Network sizes. Defaults are the desk-scale nets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub denoiser_widths: [usize; 3],
    pub time_dim: usize,
    pub prior_width: usize,
    pub prior_layers: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        let (d, p) = (DenoiserArch::default(), PriorArch::default());
        Self {
            denoiser_widths: d.widths,
            time_dim: d.time_dim,
            prior_width: p.width,
            prior_layers: p.layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleSpec,
    pub sampler: SamplerSpec,
    /// Optimization settings, including the `no_pgr` and `no_dds` ablation
    /// flags and the training seed.
    pub train: TrainConfig,
    pub arch: ArchSpec,
    /// Generator settings, used by `gen`.
    pub data: DataSpec,
    /// Dataset file written by `gen` and read by everything else.
    pub dataset: PathBuf,
    /// Seed of all sampling noise.
    pub seed: u64,
    /// Confidence bins of the calibration error.
    pub ece_bins: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::default(),
            sampler: SamplerSpec::default(),
            train: TrainConfig::default(),
            arch: ArchSpec::default(),
            data: DataSpec::default(),
            dataset: PathBuf::from("data/synth.pgrd"),
            seed: 0,
            ece_bins: 10,
            out_dir: PathBuf::from("runs/pgrd"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        crate::manifest::write_json(path, self)
    }

    /// The config with its file locations cleared. Locations never change
    /// numeric outputs, so this is what replay hashes cover.
    pub fn replayable(&self) -> Self {
        Self {
            dataset: PathBuf::new(),
            out_dir: PathBuf::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let sch = self.schedule.build()?;
        self.data.validate()?;
        self.train.validate(sch.steps())?;
        self.sampler.config(sch.steps())?;
        if self.sampler.samples == 0 {
            return Err(CliError::Usage("at least one sample per image (M) is required".into()));
        }
        if !(self.sampler.tau_out > 0.0) {
            return Err(CliError::Usage(format!("output temperature {} must be positive", self.sampler.tau_out)));
        }
        if self.ece_bins == 0 {
            return Err(CliError::Usage("at least one calibration bin is required".into()));
        }
        let a = &self.arch;
        if a.denoiser_widths.contains(&0) || a.time_dim == 0 || a.prior_width == 0 || a.prior_layers == 0 {
            return Err(CliError::Usage("network widths, depth and time embedding must be positive".into()));
        }
        if a.time_dim % 2 != 0 {
            return Err(CliError::Usage(format!("time embedding size {} must be even", a.time_dim)));
        }
        Ok(())
    }

    pub fn denoiser_arch(&self, classes: usize) -> DenoiserArch {
        self.train.denoiser_arch(&DenoiserArch {
            image_channels: 1,
            classes,
            widths: self.arch.denoiser_widths,
            time_dim: self.arch.time_dim,
            steps: self.schedule.steps(),
            ..DenoiserArch::default()
        })
    }

    pub fn prior_arch(&self, classes: usize) -> PriorArch {
        PriorArch {
            image_channels: 1,
            classes,
            width: self.arch.prior_width,
            layers: self.arch.prior_layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"sampler": {"S": 10}, "seed": 3}"#).unwrap();
        assert_eq!(cfg.sampler.steps, 10);
        assert_eq!(cfg.sampler.samples, 8);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sampler": {"steps": 10}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        cfg.validate().unwrap();
        assert!(text.contains(r#""type":"cosine""#) && text.contains(r#""T":1000"#));
    }

    #[test]
    fn too_many_sampling_steps_is_a_usage_error() {
        let mut cfg = RunConfig::default();
        cfg.sampler.steps = 1001;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }
}
