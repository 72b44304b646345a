//! Squared-cosine noise schedule and every coefficient derived from it.
//!
//! Index 0 is clean data (`rho_bar(0) == 1`, `sigma_bar(0) == 0`); the chain
//! runs over `1..=T`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("a schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("cannot pick {subset} steps out of {total}")]
    SubsetTooLarge { subset: usize, total: usize },
    #[error("invalid schedule parameter: {0}")]
    Parameter(&'static str),
}

/// Serialized form of a schedule, embedded in run configurations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ScheduleSpec {
    Cosine {
        #[serde(rename = "T")]
        steps: usize,
        s: f64,
        clip: f64,
    },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Cosine {
            steps: 1000,
            s: 0.008,
            clip: 0.999,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule, ScheduleError> {
        match *self {
            ScheduleSpec::Cosine { steps, s, clip } => Schedule::cosine(steps, s, clip),
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleSpec::Cosine { steps, .. } => steps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Schedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    rho_bar: Vec<f64>,
}

/// Coefficients of the Gaussian reverse transition from `t` to an earlier
/// index `t_prev` (`t - 1` for the plain chain).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    /// Weight of the clean estimate in the posterior mean.
    pub c_y0: f64,
    /// Weight of the current state in the posterior mean.
    pub c_st: f64,
    /// `1 - rho` of the transition.
    pub var_fixed: f64,
    /// True posterior variance `beta (1 - rho_bar_prev) / (1 - rho_bar_t)`.
    pub var_tilde: f64,
}

impl Schedule {
    /// `rho_bar(t) = f(t) / f(0)` with `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`;
    /// per-step `beta` is clipped at `clip` and `rho_bar` is then re-accumulated
    /// from the clipped values so the two never disagree.
    pub fn cosine(steps: usize, s: f64, clip: f64) -> Result<Self, ScheduleError> {
        if steps < 2 {
            return Err(ScheduleError::TooFewSteps(steps));
        }
        if !(s >= 0.0 && s.is_finite()) {
            return Err(ScheduleError::Parameter("offset s must be finite and non-negative"));
        }
        if !(clip > 0.0 && clip < 1.0) {
            return Err(ScheduleError::Parameter("clip must lie in (0, 1)"));
        }
        let f = |t: usize| {
            let u = (t as f64 / steps as f64 + s) / (1.0 + s);
            (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut beta = vec![0.0; steps + 1];
        let mut rho_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            let raw = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
            beta[t] = raw.clamp(f64::MIN_POSITIVE, clip);
            rho_bar[t] = rho_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(Self {
            spec: ScheduleSpec::Cosine { steps, s, clip },
            beta,
            rho_bar,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn rho(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn rho_bar(&self, t: usize) -> f64 {
        self.rho_bar[t]
    }

    /// Marginal noise scale `sqrt(1 - rho_bar(t))`.
    pub fn sigma_bar(&self, t: usize) -> f64 {
        (1.0 - self.rho_bar[t]).sqrt()
    }

    pub fn check_step(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.steps() {
            return Err(ScheduleError::StepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    /// Reverse-transition coefficients for the plain chain `t -> t - 1`.
    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs, ScheduleError> {
        self.check_step(t)?;
        self.transition_coeffs(t, t - 1)
    }

    /// Reverse-transition coefficients for a jump `t -> t_prev`, treating
    /// the skipped steps as one transition with `rho = rho_bar(t) / rho_bar(t_prev)`.
    pub fn transition_coeffs(&self, t: usize, t_prev: usize) -> Result<PosteriorCoeffs, ScheduleError> {
        self.check_step(t)?;
        if t_prev >= t {
            return Err(ScheduleError::StepOutOfRange { t: t_prev, max: t - 1 });
        }
        let rb_t = self.rho_bar[t];
        let rb_prev = self.rho_bar[t_prev];
        let rho = rb_t / rb_prev;
        let one_minus = 1.0 - rb_t;
        Ok(PosteriorCoeffs {
            c_y0: rb_prev.sqrt() * (1.0 - rho) / one_minus,
            c_st: rho.sqrt() * (1.0 - rb_prev) / one_minus,
            var_fixed: 1.0 - rho,
            var_tilde: (1.0 - rho) * (1.0 - rb_prev) / one_minus,
        })
    }
}

/// `S` strictly increasing steps from `1..=T`, ending at `T`, with gaps
/// differing by at most one: `t_i = ceil(i T / S)`.
pub fn uniform_subset(total: usize, subset: usize) -> Result<Vec<usize>, ScheduleError> {
    if subset == 0 || subset > total {
        return Err(ScheduleError::SubsetTooLarge { subset, total });
    }
    Ok((1..=subset).map(|i| (i * total).div_ceil(subset)).collect())
}
