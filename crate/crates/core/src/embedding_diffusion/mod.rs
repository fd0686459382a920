//! Conditional denoising diffusion over fixed-size embedding vectors.
//!
//! The forward process corrupts `x₀` to `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`; a
//! [`Denoiser`] learns to undo it given a condition vector, and
//! [`sample`] runs ancestral sampling from pure noise.

mod data;
mod denoiser;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{
    gaussian_mixture_pairs, read_pairs, ring_pairs, sliced_wasserstein, write_pairs, EmbeddingPair, Generator,
    LabelMixture,
};
pub use denoiser::{timestep_embedding, MlpDenoiser};
pub use train::{DiffusionCheckpoint, EmaState, TrainConfig, TrainRecord, Trainer};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on each `β_t`.
pub const MAX_BETA: f64 = 0.999;

/// Noise levels for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    /// `betas[0]` is unused and zero.
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Cosine schedule: `ᾱ_t = f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`,
/// each `β_t` clipped to [`MAX_BETA`] and `ᾱ` rebuilt as the running product
/// of `1 − β` so the two always agree.
pub fn cosine_schedule(timesteps: usize) -> Result<DiffusionSchedule> {
    if timesteps == 0 {
        return Err(Error::param("diffusion needs at least one timestep"));
    }
    let s = COSINE_OFFSET;
    let f = |t: usize| {
        let x = (t as f64 / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let mut betas = vec![0.0; timesteps + 1];
    let mut alpha_bar = vec![1.0; timesteps + 1];
    for t in 1..=timesteps {
        betas[t] = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t]);
    }
    Ok(DiffusionSchedule { betas, alpha_bar })
}

impl DiffusionSchedule {
    /// `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::param(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// Coefficients `(c₀, c_t, σ_t²)` of the posterior
    /// `q(x_{t−1} | x_t, x₀) = N(c₀·x₀ + c_t·x_t, σ_t²)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (ab, ab_prev, beta) = (self.alpha_bar[t], self.alpha_bar[t - 1], self.betas[t]);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct, var)
    }
}

/// `√ᾱ_t·x₀ + √(1−ᾱ_t)·noise`.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if noise.len() != x0.len() {
        return Err(Error::param("noise and x0 differ in length"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// What the network outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The clean sample `x₀`.
    #[default]
    X0,
    /// The injected noise `ε`.
    Epsilon,
}

impl Prediction {
    pub(crate) fn code(self) -> u32 {
        match self {
            Prediction::X0 => 0,
            Prediction::Epsilon => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Prediction::X0),
            1 => Some(Prediction::Epsilon),
            _ => None,
        }
    }
}

pub trait Denoiser {
    fn data_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;

    fn prediction(&self) -> Prediction {
        Prediction::X0
    }

    /// Schedule length the denoiser is tied to, if any.
    fn timesteps(&self) -> Option<usize> {
        None
    }

    /// Raw network output for `x_t` at timestep `t`.
    fn predict(&self, x_t: &[f64], t: usize, cond: &[f64]) -> Vec<f64>;

    fn num_params(&self) -> usize {
        0
    }

    /// Accumulates `(∂ predict / ∂θ)ᵀ · grad_out` into `grads`.
    fn backward(&self, _x_t: &[f64], _t: usize, _cond: &[f64], _grad_out: &[f64], _grads: &mut [f64]) {}
}

/// Per-element randomness of one training evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub noise: Vec<f64>,
}

/// `t` uniform in `1..=T` and unit Gaussian noise, one per batch element.
pub fn draw_noise<R: Rng + ?Sized>(n: usize, dim: usize, schedule: &DiffusionSchedule, rng: &mut R) -> Vec<NoiseDraw> {
    (0..n)
        .map(|_| NoiseDraw {
            t: rng.gen_range(1..=schedule.timesteps()),
            noise: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect()
}

fn check_schedule<D: Denoiser + ?Sized>(denoiser: &D, schedule: &DiffusionSchedule) -> Result<()> {
    match denoiser.timesteps() {
        Some(t) if t != schedule.timesteps() => Err(Error::param(format!(
            "denoiser built for {t} timesteps, schedule has {}",
            schedule.timesteps()
        ))),
        _ => Ok(()),
    }
}

fn check_pair<D: Denoiser + ?Sized>(pair: &EmbeddingPair, denoiser: &D) -> Result<()> {
    if pair.target.len() != denoiser.data_dim() || pair.condition.len() != denoiser.cond_dim() {
        return Err(Error::param(format!(
            "pair dims ({}, {}) do not match the denoiser ({}, {})",
            pair.target.len(),
            pair.condition.len(),
            denoiser.data_dim(),
            denoiser.cond_dim()
        )));
    }
    Ok(())
}

/// Mean squared error of the denoiser over `batch`, each element noised with
/// its own draw, and the gradient with respect to the denoiser parameters.
pub fn loss_with_draws<D: Denoiser + ?Sized>(
    batch: &[EmbeddingPair],
    draws: &[NoiseDraw],
    denoiser: &D,
    schedule: &DiffusionSchedule,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::param("empty training batch"));
    }
    if draws.len() != batch.len() {
        return Err(Error::param("one noise draw per batch element is required"));
    }
    check_schedule(denoiser, schedule)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; denoiser.num_params()];
    for (pair, draw) in batch.iter().zip(draws) {
        check_pair(pair, denoiser)?;
        let x_t = q_sample(&pair.target, draw.t, &draw.noise, schedule)?;
        let out = denoiser.predict(&x_t, draw.t, &pair.condition);
        let truth = match denoiser.prediction() {
            Prediction::X0 => &pair.target,
            Prediction::Epsilon => &draw.noise,
        };
        let resid: Vec<f64> = out.iter().zip(truth).map(|(a, b)| a - b).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>() / n;
        if !grads.is_empty() {
            let g: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
            denoiser.backward(&x_t, draw.t, &pair.condition, &g, &mut grads);
        }
    }
    Ok((loss, grads))
}

/// [`loss_with_draws`] with fresh draws from `rng`.
pub fn training_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    batch: &[EmbeddingPair],
    denoiser: &D,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let dim = batch.first().map_or(0, |p| p.target.len());
    let draws = draw_noise(batch.len(), dim, schedule, rng);
    loss_with_draws(batch, &draws, denoiser, schedule)
}

/// Converts a network output to an `x₀` estimate.
fn x0_estimate<D: Denoiser + ?Sized>(denoiser: &D, x_t: &[f64], t: usize, out: Vec<f64>, schedule: &DiffusionSchedule) -> Vec<f64> {
    match denoiser.prediction() {
        Prediction::X0 => out,
        Prediction::Epsilon => {
            let ab = schedule.alpha_bar(t);
            x_t.iter()
                .zip(&out)
                .map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt())
                .collect()
        }
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x₀`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    condition: &[f64],
    denoiser: &D,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sample_scaled(condition, denoiser, schedule, 1.0, rng)
}

/// Ancestral sampling with every posterior standard deviation multiplied by
/// `noise_scale`; 0 follows the posterior means.
pub fn sample_scaled<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    condition: &[f64],
    denoiser: &D,
    schedule: &DiffusionSchedule,
    noise_scale: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if condition.len() != denoiser.cond_dim() {
        return Err(Error::param(format!(
            "condition has {} entries, the denoiser expects {}",
            condition.len(),
            denoiser.cond_dim()
        )));
    }
    check_schedule(denoiser, schedule)?;
    let d = denoiser.data_dim();
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=schedule.timesteps()).rev() {
        let out = denoiser.predict(&x, t, condition);
        let x0 = x0_estimate(denoiser, &x, t, out, schedule);
        let (c0, ct, var) = schedule.posterior(t);
        let sigma = if t > 1 { noise_scale * var.sqrt() } else { 0.0 };
        for i in 0..d {
            let z: f64 = if t > 1 { rng.sample(StandardNormal) } else { 0.0 };
            x[i] = c0 * x0[i] + ct * x[i] + sigma * z;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("diffusion sample diverged".into()));
    }
    Ok(x)
}
