//! Variance-preserving noise schedule and the forward (noising) process.
//!
//! Timesteps are indexed `0..T`. Index 0 is the least noisy step; the
//! clean-data limit is not an index of the schedule and is represented as
//! `None` wherever a "previous timestep" can reach it (see the sampler).
//!
//! Coefficient naming follows the per-step / cumulative split:
//! `alpha[t]`, `sigma[t]` are the single-step coefficients of
//! `x_t = alpha_t * x_{t-1} + sigma_t * eps`, and `alpha_bar[t]` is the
//! cumulative signal coefficient `prod_{i<=t} alpha_i`, so that
//! `x_t = alpha_bar_t * x_0 + sqrt(1 - alpha_bar_t^2) * eps`.

use serde::{Deserialize, Serialize};

use crate::clip::Clip;
use crate::error::{Error, Result};

/// Named, parameterized schedule curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleProfile {
    /// Per-step variance `beta_t` linear from `beta_start` to `beta_end`.
    Linear { beta_start: f64, beta_end: f64 },
    /// Cosine curve on the cumulative signal variance with offset `s`.
    Cosine { s: f64 },
    /// Explicit per-step signal coefficients; length must equal `T`.
    Explicit { alphas: Vec<f64> },
}

impl Default for ScheduleProfile {
    fn default() -> Self {
        ScheduleProfile::Linear {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub profile: ScheduleProfile,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma_bar: Vec<f64>,
    snr: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(num_timesteps: usize, profile: ScheduleProfile) -> Result<Self> {
        if num_timesteps < 2 {
            return Err(Error::invalid(format!(
                "schedule needs at least 2 timesteps, got {num_timesteps}"
            )));
        }
        let alpha: Vec<f64> = match &profile {
            ScheduleProfile::Linear {
                beta_start,
                beta_end,
            } => {
                let last = (num_timesteps - 1) as f64;
                (0..num_timesteps)
                    .map(|t| {
                        let beta = beta_start + (beta_end - beta_start) * t as f64 / last;
                        (1.0 - beta).sqrt()
                    })
                    .collect()
            }
            ScheduleProfile::Cosine { s } => {
                let f = |t: f64| {
                    let x = (t / num_timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (0..num_timesteps)
                    .map(|t| {
                        let beta = (1.0 - f(t as f64 + 1.0) / f(t as f64)).min(0.999);
                        (1.0 - beta).sqrt()
                    })
                    .collect()
            }
            ScheduleProfile::Explicit { alphas } => {
                if alphas.len() != num_timesteps {
                    return Err(Error::invalid(format!(
                        "explicit profile has {} alphas for T = {num_timesteps}",
                        alphas.len()
                    )));
                }
                alphas.clone()
            }
        };
        if let Some((t, a)) = alpha
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0 && **a <= 1.0))
        {
            return Err(Error::invalid(format!(
                "profile yields alpha[{t}] = {a}, outside (0, 1]"
            )));
        }
        let sigma: Vec<f64> = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        let mut alpha_bar = Vec::with_capacity(num_timesteps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma_bar: Vec<f64> = alpha_bar
            .iter()
            .map(|ab| (1.0 - ab * ab).max(0.0).sqrt())
            .collect();
        let snr: Vec<f64> = alpha_bar
            .iter()
            .zip(&sigma_bar)
            .map(|(ab, sb)| (ab * ab / (sb * sb)).ln())
            .collect();

        for t in 1..num_timesteps {
            if !(alpha_bar[t] < alpha_bar[t - 1]) {
                return Err(Error::invalid(format!(
                    "alpha_bar not strictly decreasing at t = {t}"
                )));
            }
            if !(snr[t] < snr[t - 1]) {
                return Err(Error::invalid(format!(
                    "log-SNR not strictly decreasing at t = {t}"
                )));
            }
        }
        Ok(NoiseSchedule {
            profile,
            alpha,
            sigma,
            alpha_bar,
            sigma_bar,
            snr,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Cumulative noise coefficient `sqrt(1 - alpha_bar_t^2)`.
    pub fn sigma_bar(&self) -> &[f64] {
        &self.sigma_bar
    }

    /// Log signal-to-noise ratio of the marginal `q(x_t | x_0)`.
    pub fn snr(&self) -> &[f64] {
        &self.snr
    }

    /// Signal variance `alpha_bar_t^2` retained at step `t`.
    pub fn signal_variance(&self, t: usize) -> f64 {
        self.alpha_bar[t] * self.alpha_bar[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < self.len() {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange { t, len: self.len() })
        }
    }

    /// Closed-form marginal sample `alpha_bar_t * x0 + sigma_bar_t * noise`.
    pub fn q_sample(&self, x0: &Clip, t: usize, noise: &Clip) -> Result<Clip> {
        self.check_timestep(t)?;
        x0.check_shape(noise)?;
        Ok(affine(x0, self.alpha_bar[t], noise, self.sigma_bar[t]))
    }

    /// One forward step `alpha_t * x_prev + sigma_t * noise`.
    pub fn q_step(&self, x_prev: &Clip, t: usize, noise: &Clip) -> Result<Clip> {
        self.check_timestep(t)?;
        x_prev.check_shape(noise)?;
        Ok(affine(x_prev, self.alpha[t], noise, self.sigma[t]))
    }
}

fn affine(x: &Clip, a: f64, n: &Clip, b: f64) -> Clip {
    let (a, b) = (a as f32, b as f32);
    let mut out = x.clone();
    for (o, nv) in out.data.iter_mut().zip(&n.data) {
        *o = a * *o + b * nv;
    }
    out
}
