//! Noise schedule, forward perturbation and the reverse (sampling) process.
//!
//! Timesteps are 1-indexed; `t = 0` denotes the clean sample, for which
//! `alpha_bar(0) == 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-timestep tables. Index 0 holds the clean-sample entries.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas including both endpoints.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// Schedule from explicit betas for steps `1..=len`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let mut all_betas = Vec::with_capacity(betas.len() + 1);
        all_betas.push(0.0);
        all_betas.extend(betas);
        let mut alpha_bars = vec![1.0; all_betas.len()];
        for t in 1..all_betas.len() {
            alpha_bars[t] = alpha_bars[t - 1] * (1.0 - all_betas[t]);
        }
        let mut sigmas = vec![0.0; all_betas.len()];
        for t in 2..all_betas.len() {
            let var = (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * all_betas[t];
            sigmas[t] = var.sqrt();
        }
        Ok(Self {
            betas: all_betas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Reverse-step noise scale: square root of the posterior variance.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Timestep {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

fn check_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `sqrt(alpha_bar)·x0 + sqrt(1 − alpha_bar)·noise` for an explicit `alpha_bar`.
pub fn perturb_with(x0: &Tensor, noise: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_with(noise, "forward_perturb", |x, e| a * x + b * e)
}

/// Closed-form sample of `x_t` given the clean `x0`.
pub fn forward_perturb(
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    check_shapes("forward_perturb", x0, noise)?;
    perturb_with(x0, noise, sched.alpha_bar(t))
}

/// Coefficients `(on x0, on x_t)` of the posterior mean of `q(x_{t-1} | x_t, x0)`.
pub fn posterior_coefficients(alpha_t: f64, alpha_bar_t: f64, alpha_bar_prev: f64) -> (f64, f64) {
    let beta_t = 1.0 - alpha_t;
    let denom = 1.0 - alpha_bar_t;
    (
        alpha_bar_prev.sqrt() * beta_t / denom,
        alpha_t.sqrt() * (1.0 - alpha_bar_prev) / denom,
    )
}

pub fn posterior_mean(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    check_shapes("posterior_mean", x_t, x0_hat)?;
    let (c0, ct) =
        posterior_coefficients(sched.alpha(t), sched.alpha_bar(t), sched.alpha_bar(t - 1));
    x0_hat.zip_with(x_t, "posterior_mean", |x0, xt| c0 * x0 + ct * xt)
}

/// One reverse step from an x0 prediction: posterior mean plus `sigma_t·z`.
/// `z` is ignored at `t = 1`, where the step is deterministic.
pub fn posterior_step_from_x0(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mean = posterior_mean(x_t, x0_hat, t, sched)?;
    check_shapes("posterior_step_from_x0", x_t, z)?;
    let s = sched.sigma(t);
    if t == 1 || s == 0.0 {
        return Ok(mean);
    }
    mean.zip_with(z, "posterior_step_from_x0", |m, e| m + s * e)
}

/// Noise implied by an x0 prediction at step `t`.
pub fn eps_from_x0(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    check_shapes("eps_from_x0", x_t, x0_hat)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_with(x0_hat, "eps_from_x0", |xt, x0| (xt - a * x0) / b)
}

/// Noise-prediction form of the reverse step.
pub fn reverse_step_eps(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_timestep(t)?;
    check_shapes("reverse_step_eps", x_t, eps_hat)?;
    check_shapes("reverse_step_eps", x_t, z)?;
    let alpha = sched.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mean = x_t.zip_with(eps_hat, "reverse_step_eps", |x, e| inv * (x - coef * e))?;
    let s = sched.sigma(t);
    if t == 1 || s == 0.0 {
        return Ok(mean);
    }
    mean.zip_with(z, "reverse_step_eps", |m, e| m + s * e)
}

/// A model that predicts the clean sample from `x_t`.
pub trait X0Predictor {
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> X0Predictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    /// When false every `sigma_t` is treated as zero.
    pub stochastic: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { stochastic: true }
    }
}

/// Runs the reverse chain from `x_T ~ N(0, I)` down to `t = 0`.
pub fn sample_chain<P, R>(
    model: &P,
    shape: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
    opts: SampleOptions,
) -> Result<Tensor>
where
    P: X0Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let mut x = Tensor::randn(shape, 1.0, rng);
    let zero = Tensor::zeros(shape);
    for t in (1..=sched.steps()).rev() {
        let x0_hat = model.predict_x0(&x, t)?;
        if x0_hat.shape() != shape {
            return Err(Error::Contract(format!(
                "denoiser returned shape {:?}, expected {shape:?}",
                x0_hat.shape()
            )));
        }
        let z = if opts.stochastic && t > 1 {
            Tensor::randn(shape, 1.0, rng)
        } else {
            zero.clone()
        };
        x = posterior_step_from_x0(&x, &x0_hat, t, &z, sched)?;
    }
    Ok(x)
}
