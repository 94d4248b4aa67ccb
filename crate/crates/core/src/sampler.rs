//! Deterministic DDIM sampling with classifier-free guidance.
//!
//! A run visits `S = num_inference_steps` model timesteps `ts[0] > ... > ts[S-1]`
//! over `[0, T)` with both endpoints included. With [`TimestepSpacing::Uniform`]
//! `ts[k] = round((T-1) * u_k)`, with [`TimestepSpacing::Quadratic`]
//! `ts[k] = round((T-1) * u_k^2)`, where `u_k = (S-1-k) / (S-1)`; in either
//! case ties are broken bottom-up by `ts[k] = max(ts[k], ts[k+1] + 1)`.
//! States are addressed by
//! *level* `l` in `S..=0`: level `S` is the initial noise, and the step
//! taken at level `l` (model timestep `ts[S-l]`) produces level `l-1`.
//! Level 0 is the clean estimate. Injected latents replace the state a
//! step produces, after the DDIM update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clip::Clip;
use crate::denoiser::{Conditioning, Denoiser};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// How the inference steps are spread over the training timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSpacing {
    Uniform,
    /// Denser near the data end, where DDIM's per-step error is largest.
    #[default]
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_inference_steps: usize,
    #[serde(default)]
    pub spacing: TimestepSpacing,
    pub guidance_scale: f64,
    /// DDIM stochasticity; only 0 is supported.
    pub eta: f64,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_inference_steps: 50,
            spacing: TimestepSpacing::Quadratic,
            guidance_scale: 10.0,
            eta: 0.0,
            record_trajectory: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, num_timesteps: usize) -> Result<()> {
        if self.num_inference_steps == 0 || self.num_inference_steps > num_timesteps {
            return Err(Error::Config(format!(
                "num_inference_steps must be in [1, {num_timesteps}], got {}",
                self.num_inference_steps
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        if self.eta != 0.0 {
            return Err(Error::Config("only eta = 0 (deterministic DDIM) is supported".into()));
        }
        Ok(())
    }
}

/// Visited model timesteps in iteration (descending) order.
pub fn inference_timesteps(num_timesteps: usize, steps: usize, spacing: TimestepSpacing) -> Result<Vec<usize>> {
    if steps == 0 || steps > num_timesteps {
        return Err(Error::Config(format!(
            "cannot visit {steps} of {num_timesteps} timesteps"
        )));
    }
    if steps == 1 {
        return Ok(vec![num_timesteps - 1]);
    }
    let span = (num_timesteps - 1) as f64;
    let mut ts: Vec<usize> = (0..steps)
        .map(|k| {
            let u = (steps - 1 - k) as f64 / (steps - 1) as f64;
            let u = match spacing {
                TimestepSpacing::Uniform => u,
                TimestepSpacing::Quadratic => u * u,
            };
            (span * u).round() as usize
        })
        .collect();
    for k in (0..steps - 1).rev() {
        ts[k] = ts[k].max(ts[k + 1] + 1);
    }
    Ok(ts)
}

/// `eps_uncond + w * (eps_cond - eps_uncond)`. At `w = 1` the conditional
/// prediction is returned as is.
pub fn guided_noise(eps_uncond: &Clip, eps_cond: &Clip, w: f64) -> Result<Clip> {
    eps_uncond.check_shape(eps_cond)?;
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    let mut out = eps_uncond.clone();
    for (o, c) in out.data.iter_mut().zip(&eps_cond.data) {
        let u = *o as f64;
        *o = (u + w * (*c as f64 - u)) as f32;
    }
    Ok(out)
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` = clean data):
/// `x0 = (z_t - sigma_bar_t eps) / alpha_bar_t`, then
/// `z_prev = alpha_bar_prev x0 + sigma_bar_prev eps`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z_t: &Clip,
    eps_hat: &Clip,
    t: usize,
    t_prev: Option<usize>,
) -> Result<Clip> {
    schedule.check_timestep(t)?;
    z_t.check_shape(eps_hat)?;
    let (ab_p, sb_p) = match t_prev {
        Some(tp) if tp >= t => {
            return Err(Error::invalid(format!("t_prev {tp} must be below t {t}")));
        }
        Some(tp) => (schedule.alpha_bar()[tp], schedule.sigma_bar()[tp]),
        None => (1.0, 0.0),
    };
    let (ab, sb) = (schedule.alpha_bar()[t], schedule.sigma_bar()[t]);
    let mut out = z_t.clone();
    for (o, e) in out.data.iter_mut().zip(&eps_hat.data) {
        let e = *e as f64;
        let x0 = (*o as f64 - sb * e) / ab;
        *o = (ab_p * x0 + sb_p * e) as f32;
    }
    Ok(out)
}

/// Supplies replacement latents for selected `(level, frame)` pairs.
pub trait LatentInjector {
    /// Replacement for `frame` of the state at `level`, if any.
    fn inject(&self, level: usize, frame: usize) -> Option<&[f32]>;

    /// Every level this injector may replace; checked before sampling.
    fn levels(&self) -> Vec<usize>;
}

/// Explicit `(level, frame) -> latent` table.
#[derive(Debug, Clone, Default)]
pub struct TableInjector {
    entries: BTreeMap<(usize, usize), Vec<f32>>,
}

impl TableInjector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, level: usize, frame: usize, latent: Vec<f32>) {
        self.entries.insert((level, frame), latent);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl LatentInjector for TableInjector {
    fn inject(&self, level: usize, frame: usize) -> Option<&[f32]> {
        self.entries.get(&(level, frame)).map(|v| v.as_slice())
    }

    fn levels(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.entries.keys().map(|(l, _)| *l).collect();
        l.dedup();
        l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub level: usize,
    /// Model timestep of this state; `None` for the clean level 0.
    pub timestep: Option<usize>,
    pub latents: Clip,
}

/// Every state of one clip's reverse process, in iteration order
/// (level `S` first, level 0 last). Memory: `(S + 1) * N * C * H * W` floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingTrajectory {
    pub clip_index: usize,
    pub entries: Vec<TrajectoryEntry>,
    pub config_hash: String,
}

impl DenoisingTrajectory {
    pub fn num_steps(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    pub fn level(&self, level: usize) -> Option<&Clip> {
        let s = self.num_steps();
        if level > s {
            return None;
        }
        self.entries.get(s - level).map(|e| &e.latents)
    }

    pub fn frame(&self, level: usize, frame: usize) -> Option<&[f32]> {
        self.level(level)
            .filter(|c| frame < c.frames)
            .map(|c| c.frame(frame))
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub z0: Clip,
    pub trajectory: Option<DenoisingTrajectory>,
}

/// Digest identifying the sampling procedure (config + schedule).
pub fn sampler_hash(schedule: &NoiseSchedule, cfg: &SamplerConfig) -> String {
    json_digest(&(cfg, &schedule.profile, schedule.len()))
}

fn predict(model: &dyn Denoiser, z: &Clip, t: usize, cond: &Conditioning, w: f64) -> Result<Clip> {
    if w == 1.0 {
        return model.predict_noise(z, t, cond);
    }
    let null = cond.as_null();
    let (u, c) = rayon::join(
        || model.predict_noise(z, t, &null),
        || model.predict_noise(z, t, cond),
    );
    guided_noise(&u?, &c?, w)
}

/// Runs the reverse process from `initial_noise` (`[N, C, H, W]`).
pub fn sample_clip(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    initial_noise: &Clip,
    cfg: &SamplerConfig,
    injector: Option<&dyn LatentInjector>,
    clip_index: usize,
) -> Result<SampleOutput> {
    cfg.validate(schedule.len())?;
    if model.num_timesteps() != schedule.len() {
        return Err(Error::invalid(format!(
            "model built for T = {}, schedule has T = {}",
            model.num_timesteps(),
            schedule.len()
        )));
    }
    let ts = inference_timesteps(schedule.len(), cfg.num_inference_steps, cfg.spacing)?;
    let s = ts.len();
    if let Some(inj) = injector {
        if let Some(bad) = inj.levels().into_iter().find(|&l| l >= s) {
            return Err(Error::invalid(format!(
                "override references level {bad}, but only levels 0..{s} are produced by steps"
            )));
        }
        for l in inj.levels() {
            for j in 0..initial_noise.frames {
                if let Some(v) = inj.inject(l, j) {
                    if v.len() != initial_noise.frame_len() {
                        return Err(Error::ShapeMismatch {
                            expected: vec![initial_noise.frame_len()],
                            got: vec![v.len()],
                        });
                    }
                }
            }
        }
    }
    let config_hash = sampler_hash(schedule, cfg);
    let mut entries = Vec::new();
    if cfg.record_trajectory {
        entries.reserve(s + 1);
        entries.push(TrajectoryEntry {
            level: s,
            timestep: Some(ts[0]),
            latents: initial_noise.clone(),
        });
    }
    let mut z = initial_noise.clone();
    for k in 0..s {
        let t = ts[k];
        let t_prev = ts.get(k + 1).copied();
        let eps = predict(model, &z, t, cond, cfg.guidance_scale)?;
        z.check_shape(&eps)?;
        let mut next = ddim_step(schedule, &z, &eps, t, t_prev)?;
        let level = s - k - 1;
        if let Some(inj) = injector {
            for j in 0..next.frames {
                if let Some(v) = inj.inject(level, j) {
                    next.frame_mut(j).copy_from_slice(v);
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite latent after step at timestep {t}"
            )));
        }
        if cfg.record_trajectory {
            entries.push(TrajectoryEntry {
                level,
                timestep: t_prev,
                latents: next.clone(),
            });
        }
        z = next;
    }
    Ok(SampleOutput {
        z0: z,
        trajectory: cfg.record_trajectory.then(|| DenoisingTrajectory {
            clip_index,
            entries,
            config_hash,
        }),
    })
}
