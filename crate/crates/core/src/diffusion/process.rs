use serde::{Deserialize, Serialize};

use crate::ndgrad::{Real, Tensor};
use crate::rng::Stream;
use crate::schedule::{PosteriorCoeffs, Schedule, ScheduleError};

use super::fields::{LabelField, PriorField};
use super::DiffusionError;

/// Chain state `s_t`. The residual view is `s_t - prior`; `t == 0` is clean.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState<T> {
    pub s: Tensor<T>,
    pub t: usize,
}

impl<T: Real> DiffusionState<T> {
    pub fn residual(&self, prior: &PriorField<T>) -> Result<Tensor<T>, DiffusionError> {
        Ok(self.s.sub(prior.tensor())?)
    }
}

/// Transition mean of one forward step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardForm {
    /// `sqrt(rho_t)` on the previous state: composes to the closed-form
    /// marginal used in training.
    #[default]
    Corrected,
    /// `rho_t` on the previous state. Does not compose to the marginal; kept
    /// to demonstrate exactly that.
    Literal,
}

/// How the prior enters the reverse-step mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorMode {
    /// `prior + c_y0 (y0 - prior) + c_st (s_t - prior)`: the DDPM posterior
    /// on residuals, so states stay centred on the prior.
    #[default]
    Centered,
    /// `c_y0 y0 + c_st s_t`, which leaks `(1 - c_y0 - c_st) prior` per step.
    Literal,
}

/// Reverse-chain variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    /// Stochastic, variance `1 - rho` of the transition.
    DdpmFixed,
    /// Stochastic, true posterior variance.
    DdpmTilde,
    /// Deterministic (`eta = 0`) jumps between subset steps.
    #[default]
    Ddim,
}

impl Sampler {
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Sampler::Ddim)
    }

    pub fn name(self) -> &'static str {
        match self {
            Sampler::DdpmFixed => "ddpm-fixed",
            Sampler::DdpmTilde => "ddpm-tilde",
            Sampler::Ddim => "ddim",
        }
    }
}

impl std::str::FromStr for Sampler {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ddpm-fixed" => Ok(Sampler::DdpmFixed),
            "ddpm-tilde" => Ok(Sampler::DdpmTilde),
            "ddim" => Ok(Sampler::Ddim),
            other => Err(DiffusionError::InvalidArgument(format!(
                "unknown sampler {other:?}; expected ddpm-fixed, ddpm-tilde or ddim"
            ))),
        }
    }
}

/// Counts prior terms entering reverse-step means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InjectionCounter(usize);

impl InjectionCounter {
    pub fn count(self) -> usize {
        self.0
    }
}

/// `t` must index the schedule, `0..=T`.
fn check_index(sch: &Schedule, t: usize) -> Result<(), DiffusionError> {
    if t > sch.steps() {
        return Err(ScheduleError::StepOutOfRange { t, max: sch.steps() }.into());
    }
    Ok(())
}

/// Closed-form marginal: `s_t = sqrt(rb) y + (1 - sqrt(rb)) prior + sigma_bar eps`.
pub fn q_sample<T: Real>(
    y: &LabelField<T>,
    prior: &PriorField<T>,
    t: usize,
    eps: &Tensor<T>,
    sch: &Schedule,
) -> Result<DiffusionState<T>, DiffusionError> {
    check_index(sch, t)?;
    let a = sch.rho_bar(t).sqrt();
    let r0 = y.tensor().sub(prior.tensor())?;
    let r = r0.axpby(T::of(a), eps, T::of(sch.sigma_bar(t)))?;
    Ok(DiffusionState {
        s: r.add(prior.tensor())?,
        t,
    })
}

/// One forward transition from `prev.t` to `prev.t + 1`.
pub fn q_step<T: Real>(
    prev: &DiffusionState<T>,
    prior: &PriorField<T>,
    eps: &Tensor<T>,
    sch: &Schedule,
    form: ForwardForm,
) -> Result<DiffusionState<T>, DiffusionError> {
    let t = prev.t + 1;
    sch.check_step(t)?;
    let rho = sch.rho(t);
    let keep = match form {
        ForwardForm::Corrected => rho.sqrt(),
        ForwardForm::Literal => rho,
    };
    let (keep, noise) = (T::of(keep), T::of((1.0 - rho).sqrt()));
    let p = prior.tensor();
    prev.s.expect_same_shape("q_step", p)?;
    prev.s.expect_same_shape("q_step", eps)?;
    // One fused pass; long composed chains spend most of their time here.
    let data = prev
        .s
        .data()
        .iter()
        .zip(p.data())
        .zip(eps.data())
        .map(|((&x, &pv), &e)| (keep * (x - pv) + noise * e) + pv)
        .collect();
    Ok(DiffusionState {
        s: Tensor::new(prev.s.shape(), data)?,
        t,
    })
}

/// `v = sqrt(rb) eps - sigma_bar r0`.
pub fn v_target<T: Real>(r0: &Tensor<T>, eps: &Tensor<T>, t: usize, sch: &Schedule) -> Result<Tensor<T>, DiffusionError> {
    check_index(sch, t)?;
    Ok(eps.axpby(T::of(sch.rho_bar(t).sqrt()), r0, T::of(-sch.sigma_bar(t)))?)
}

/// Inverse rotation: `(r0, eps)` from `(r_t, v)`.
pub fn recover<T: Real>(
    r_t: &Tensor<T>,
    v: &Tensor<T>,
    t: usize,
    sch: &Schedule,
) -> Result<(Tensor<T>, Tensor<T>), DiffusionError> {
    check_index(sch, t)?;
    let (a, b) = (T::of(sch.rho_bar(t).sqrt()), T::of(sch.sigma_bar(t)));
    let r0 = r_t.axpby(a, v, -b)?;
    let eps = r_t.axpby(b, v, a)?;
    Ok((r0, eps))
}

/// Clean estimate `prior + r0_hat` given a predicted `v` at `state.t`.
pub fn clean_estimate<T: Real>(
    state: &DiffusionState<T>,
    v_hat: &Tensor<T>,
    prior: &PriorField<T>,
    sch: &Schedule,
) -> Result<Tensor<T>, DiffusionError> {
    let r_t = state.residual(prior)?;
    let (r0, _) = recover(&r_t, v_hat, state.t, sch)?;
    Ok(r0.add(prior.tensor())?)
}

fn combine<T: Real>(
    s_t: &Tensor<T>,
    y0: &Tensor<T>,
    prior: &Tensor<T>,
    c: PosteriorCoeffs,
    mode: PosteriorMode,
) -> Result<Tensor<T>, DiffusionError> {
    let (cy, cs) = (T::of(c.c_y0), T::of(c.c_st));
    let mu = match mode {
        PosteriorMode::Centered => {
            let leak = T::one() - cy - cs;
            let mut mu = y0.axpby(cy, s_t, cs)?;
            for (m, &p) in mu.data_mut().iter_mut().zip(prior.data()) {
                *m += leak * p;
            }
            mu
        }
        PosteriorMode::Literal => y0.axpby(cy, s_t, cs)?,
    };
    Ok(mu)
}

/// Reverse mean from `t` to `t - 1`.
pub fn posterior_mean<T: Real>(
    s_t: &Tensor<T>,
    y0: &Tensor<T>,
    prior: &PriorField<T>,
    t: usize,
    sch: &Schedule,
    mode: PosteriorMode,
) -> Result<Tensor<T>, DiffusionError> {
    transition_mean(s_t, y0, prior, t, t - usize::from(t > 0), sch, mode)
}

/// Reverse mean from `t` to any earlier `t_prev`, using the effective
/// `rho = rho_bar(t) / rho_bar(t_prev)` of the jump.
pub fn transition_mean<T: Real>(
    s_t: &Tensor<T>,
    y0: &Tensor<T>,
    prior: &PriorField<T>,
    t: usize,
    t_prev: usize,
    sch: &Schedule,
    mode: PosteriorMode,
) -> Result<Tensor<T>, DiffusionError> {
    let c = sch.transition_coeffs(t, t_prev)?;
    s_t.expect_same_shape("posterior mean", y0)?;
    s_t.expect_same_shape("posterior mean", prior.tensor())?;
    combine(s_t, y0, prior.tensor(), c, mode)
}

/// Deterministic jump `r_prev = sqrt(rb_prev) r0_hat + sigma_bar_prev eps_hat`
/// with `eps_hat` implied by the current residual and `r0_hat`.
pub fn ddim_mean<T: Real>(
    s_t: &Tensor<T>,
    y0: &Tensor<T>,
    prior: &PriorField<T>,
    t: usize,
    t_prev: usize,
    sch: &Schedule,
) -> Result<Tensor<T>, DiffusionError> {
    sch.transition_coeffs(t, t_prev)?;
    let p = prior.tensor();
    let r_t = s_t.sub(p)?;
    let r0 = y0.sub(p)?;
    let (a_t, b_t) = (sch.rho_bar(t).sqrt(), sch.sigma_bar(t));
    let (a_p, b_p) = (sch.rho_bar(t_prev).sqrt(), sch.sigma_bar(t_prev));
    // r_prev = a_p r0 + b_p (r_t - a_t r0) / b_t
    let k = b_p / b_t;
    let mut out = r0.axpby(T::of(a_p - k * a_t), &r_t, T::of(k))?;
    for (o, &pv) in out.data_mut().iter_mut().zip(p.data()) {
        *o += pv;
    }
    Ok(out)
}

/// Mean of the reverse step from `state.t` to `t_prev` for `sampler`. Every
/// call injects the prior exactly once and records it in `counter`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_mean<T: Real>(
    sampler: Sampler,
    mode: PosteriorMode,
    state: &DiffusionState<T>,
    y0: &Tensor<T>,
    prior: &PriorField<T>,
    t_prev: usize,
    sch: &Schedule,
    counter: &mut InjectionCounter,
) -> Result<Tensor<T>, DiffusionError> {
    let mu = match sampler {
        Sampler::Ddim => ddim_mean(&state.s, y0, prior, state.t, t_prev, sch)?,
        Sampler::DdpmFixed | Sampler::DdpmTilde => transition_mean(&state.s, y0, prior, state.t, t_prev, sch, mode)?,
    };
    counter.0 += 1;
    Ok(mu)
}

/// Move to `t_prev` from mean `mu`, adding `sigma z` for stochastic samplers.
/// The final transition into `t_prev == 0` adds no noise, so the chain ends
/// on the clean estimate.
pub fn reverse_step<T: Real>(
    state: &DiffusionState<T>,
    mu: Tensor<T>,
    t_prev: usize,
    sch: &Schedule,
    sampler: Sampler,
    noise: &mut Stream,
) -> Result<DiffusionState<T>, DiffusionError> {
    reverse_step_with(state, mu, t_prev, sch, sampler, |shape| Ok(noise.normal_tensor(shape)))
}

/// [`reverse_step`] with caller-supplied standard normal draws, requested
/// only when noise is actually added.
pub fn reverse_step_with<T: Real>(
    state: &DiffusionState<T>,
    mu: Tensor<T>,
    t_prev: usize,
    sch: &Schedule,
    sampler: Sampler,
    draw: impl FnOnce(&[usize]) -> Result<Tensor<T>, DiffusionError>,
) -> Result<DiffusionState<T>, DiffusionError> {
    if state.t == 0 {
        return Err(DiffusionError::Exhausted);
    }
    let c = sch.transition_coeffs(state.t, t_prev)?;
    let var = match sampler {
        Sampler::DdpmFixed => c.var_fixed,
        Sampler::DdpmTilde => c.var_tilde,
        Sampler::Ddim => 0.0,
    };
    let mut s = mu;
    if t_prev > 0 && var > 0.0 {
        let sigma = T::of(var.sqrt());
        let z = draw(s.shape())?;
        s.expect_same_shape("reverse step noise", &z)?;
        for (v, &zv) in s.data_mut().iter_mut().zip(z.data()) {
            *v += sigma * zv;
        }
    }
    Ok(DiffusionState { s, t: t_prev })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sch() -> Schedule {
        Schedule::cosine(100, 0.008, 0.999).unwrap()
    }

    fn field(seed: u64, name: &str) -> Tensor<f64> {
        Stream::new(seed, name).normal_tensor(&[2, 3, 2, 2])
    }

    fn label() -> LabelField<f64> {
        LabelField::from_indices(&[0, 1, 2, 0, 2, 2, 1, 0], 2, 3, 2, 2).unwrap()
    }

    fn prior() -> PriorField<f64> {
        let raw = Stream::new(9, "prior").normal_tensor::<f64>(&[2, 3, 2, 2]);
        PriorField::new(crate::ndgrad::softmax_channels(&raw).unwrap()).unwrap()
    }

    #[test]
    fn q_sample_at_zero_is_the_label() {
        let s = q_sample(&label(), &prior(), 0, &field(1, "eps"), &sch()).unwrap();
        assert_eq!(s.s, *label().tensor());
    }

    #[test]
    fn q_sample_rejects_out_of_range_and_shape() {
        assert!(q_sample(&label(), &prior(), 101, &field(1, "eps"), &sch()).is_err());
        let eps = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(q_sample(&label(), &prior(), 5, &eps, &sch()).is_err());
    }

    #[test]
    fn q_step_prior_is_a_fixed_point() {
        let p = prior();
        let zero = Tensor::zeros(&[2, 3, 2, 2]);
        for form in [ForwardForm::Corrected, ForwardForm::Literal] {
            let start = DiffusionState {
                s: p.tensor().clone(),
                t: 10,
            };
            let next = q_step(&start, &p, &zero, &sch(), form).unwrap();
            assert_eq!(next.t, 11);
            assert!(next.s.max_abs_diff(p.tensor()).unwrap() < 1e-15);
        }
    }

    #[test]
    fn q_step_past_the_end_is_rejected() {
        let p = prior();
        let start = DiffusionState {
            s: p.tensor().clone(),
            t: 100,
        };
        assert!(q_step(&start, &p, &Tensor::zeros(&[2, 3, 2, 2]), &sch(), ForwardForm::Corrected).is_err());
    }

    #[test]
    fn noiseless_corrected_steps_telescope_to_the_marginal_mean() {
        let (sch, p, y) = (sch(), prior(), label());
        let zero = Tensor::zeros(&[2, 3, 2, 2]);
        let mut state = DiffusionState {
            s: y.tensor().clone(),
            t: 0,
        };
        for _ in 0..60 {
            state = q_step(&state, &p, &zero, &sch, ForwardForm::Corrected).unwrap();
        }
        let mean = q_sample(&y, &p, 60, &zero, &sch).unwrap();
        assert!(state.s.max_abs_diff(&mean.s).unwrap() < 1e-6);
    }

    #[test]
    fn v_target_limits() {
        let sch = sch();
        let (r0, eps) = (field(2, "r0"), field(3, "eps"));
        assert_eq!(v_target(&r0, &eps, 0, &sch).unwrap(), eps);
        // At T the schedule leaves rho_bar below 1e-4, so v is close to -r0.
        let v = v_target(&r0, &eps, 100, &sch).unwrap();
        assert!(v.max_abs_diff(&r0.scale(-1.0)).unwrap() < 0.05);
    }

    #[test]
    fn recover_at_zero_with_zero_v() {
        let r = field(4, "r");
        let (r0, eps) = recover(&r, &Tensor::zeros(r.shape()), 0, &sch()).unwrap();
        assert_eq!(r0, r);
        assert!(eps.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn posterior_mean_at_one_is_the_clean_estimate() {
        let (sch, p) = (sch(), prior());
        let (s, y0) = (field(5, "s"), field(6, "y0"));
        for mode in [PosteriorMode::Centered, PosteriorMode::Literal] {
            let mu = posterior_mean(&s, &y0, &p, 1, &sch, mode).unwrap();
            assert!(mu.max_abs_diff(&y0).unwrap() < 1e-12);
        }
        assert!(posterior_mean(&s, &y0, &p, 0, &sch, PosteriorMode::Centered).is_err());
    }

    #[test]
    fn centered_minus_literal_is_the_prior_leak() {
        let (sch, p) = (sch(), prior());
        let (s, y0) = (field(7, "s"), field(8, "y0"));
        let t = 40;
        let c = sch.posterior_coeffs(t).unwrap();
        let a = posterior_mean(&s, &y0, &p, t, &sch, PosteriorMode::Centered).unwrap();
        let b = posterior_mean(&s, &y0, &p, t, &sch, PosteriorMode::Literal).unwrap();
        for ((x, y), pv) in a.data().iter().zip(b.data()).zip(p.tensor().data()) {
            assert!((x - y - (1.0 - c.c_y0 - c.c_st) * pv).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_jump_to_zero_lands_on_the_estimate() {
        let (sch, p) = (sch(), prior());
        let (s, y0) = (field(10, "s"), field(11, "y0"));
        let mu = ddim_mean(&s, &y0, &p, 17, 0, &sch).unwrap();
        assert!(mu.max_abs_diff(&y0).unwrap() < 1e-12);
    }

    #[test]
    fn tilde_noise_vanishes_at_step_one() {
        let sch = sch();
        let state = DiffusionState { s: field(12, "s"), t: 1 };
        let mu = field(13, "mu");
        let next = reverse_step(&state, mu.clone(), 0, &sch, Sampler::DdpmTilde, &mut Stream::new(0, "z")).unwrap();
        assert_eq!(next.s, mu);
    }

    #[test]
    fn exhausted_chain_is_rejected() {
        let state = DiffusionState {
            s: field(14, "s"),
            t: 0,
        };
        let mu = state.s.clone();
        assert!(matches!(
            reverse_step(&state, mu, 0, &sch(), Sampler::Ddim, &mut Stream::new(0, "z")),
            Err(DiffusionError::Exhausted)
        ));
    }

    #[test]
    fn sampler_names_round_trip() {
        for s in [Sampler::DdpmFixed, Sampler::DdpmTilde, Sampler::Ddim] {
            assert_eq!(s.name().parse::<Sampler>().unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), s.name());
        }
        assert!("ddpm".parse::<Sampler>().is_err());
    }
}
