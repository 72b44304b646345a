use std::path::Path;

use pgrd::diffusion::DiffusionError;
use pgrd::metrics::MetricError;
use pgrd::ndgrad::NdError;
use pgrd::nets::NetError;
use pgrd::schedule::ScheduleError;
use pgrd::synthdata::SynthError;
use pgrd::training::TrainError;
use thiserror::Error;

/// Every failure a command can report, split by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config, missing or malformed inputs. Exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Non-finite values during training or sampling, or a failed gradient
    /// check. Exit status 3.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }
}

fn nd_is_numeric(e: &NdError) -> bool {
    matches!(e, NdError::NonFinite { .. })
}

fn net_is_numeric(e: &NetError) -> bool {
    matches!(e, NetError::Nd(nd) if nd_is_numeric(nd))
}

impl From<NdError> for CliError {
    fn from(e: NdError) -> Self {
        if nd_is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        if net_is_numeric(&e) {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        let numeric = match &e {
            DiffusionError::Nd(nd) => nd_is_numeric(nd),
            DiffusionError::Net(net) => net_is_numeric(net),
            _ => false,
        };
        if numeric {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Nd(e) => e.into(),
            TrainError::Net(e) => e.into(),
            TrainError::Diffusion(e) => e.into(),
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            e => CliError::Usage(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}
