//! Clip-by-clip long-video generation.
//!
//! Clip 0 starts from fresh standard-normal noise. Every later clip starts
//! from the previous clip's initial noise in reversed frame order, with the
//! frames past the prompt blended toward fresh noise, and its first frames
//! are pinned to the previous clip's trajectory for an early, frame-dependent
//! share of the steps.
//!
//! Staged guidance works on the inference-step scale: with `S` steps, the
//! step at level `t` (in `S..=1`) guides frame `j` when
//! `t > (1 - beta) * S + beta * S * j / M`, and the guided state it produces
//! (level `t - 1`) is copied from frame `N - 1 - j` of the previous clip.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clip::Clip;
use crate::denoiser::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::sampler::{sample_clip, DenoisingTrajectory, LatentInjector, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// Slack on the staging threshold so that `t` landing on it in exact
/// arithmetic is not flipped by rounding.
const THRESHOLD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongVideoConfig {
    /// Frames per clip (`N`).
    pub frames: usize,
    /// Prompt frames carried over from the previous clip (`M`).
    pub prompt_frames: usize,
    /// Reuse ratio of the previous clip's noise for non-prompt frames.
    pub alpha: f64,
    /// Share of the steps over which prompt frames are guided.
    pub beta: f64,
    pub num_clips: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Keep every clip's trajectory in the result, not just the last one.
    #[serde(default)]
    pub keep_trajectories: bool,
}

impl Default for LongVideoConfig {
    fn default() -> Self {
        LongVideoConfig {
            frames: 8,
            prompt_frames: 4,
            alpha: 4.0,
            beta: 0.4,
            num_clips: 3,
            sampler: SamplerConfig::default(),
            seed: 0,
            keep_trajectories: false,
        }
    }
}

impl LongVideoConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return fail("frames per clip must be >= 1".into());
        }
        if self.prompt_frames > self.frames {
            return fail(format!(
                "prompt frames ({}) exceed frames per clip ({})",
                self.prompt_frames, self.frames
            ));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if self.beta > 0.0 && self.prompt_frames == 0 {
            return fail("beta > 0 needs at least one prompt frame".into());
        }
        if self.num_clips == 0 {
            return fail("number of clips must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongVideoResult {
    /// Clean latents of every clip, in generation order.
    pub clips: Vec<Clip>,
    /// Initial noise each clip started from.
    pub initial_noise: Vec<Clip>,
    /// All trajectories if requested, otherwise only the last clip's.
    pub trajectories: Vec<DenoisingTrajectory>,
    pub config: LongVideoConfig,
    pub metrics_digest: Option<String>,
}

impl LongVideoResult {
    /// All clips joined along the frame axis.
    pub fn video(&self) -> Result<Clip> {
        Clip::concat(&self.clips)
    }
}

/// Reverses the frame order of the previous clip's initial noise.
pub fn fnr_init(prev_initial_noise: &Clip) -> Result<Clip> {
    if prev_initial_noise.frames == 0 {
        return Err(Error::invalid("cannot reverse an empty clip"));
    }
    Ok(prev_initial_noise.reversed())
}

/// Frames `j >= M` become `a / sqrt(1 + a^2) * x + e`, `e ~ N(0, 1 / (1 + a^2))`;
/// frames `j < M` pass through untouched.
pub fn pns_perturb<R: Rng>(reversed: &Clip, prompt_frames: usize, alpha: f64, rng: &mut R) -> Result<Clip> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    if prompt_frames > reversed.frames {
        return Err(Error::invalid(format!(
            "prompt frames ({prompt_frames}) exceed clip length ({})",
            reversed.frames
        )));
    }
    let (keep, fresh) = pns_coefficients(alpha);
    let fresh_sd = fresh.sqrt();
    let mut out = reversed.clone();
    for j in prompt_frames..out.frames {
        for v in out.frame_mut(j) {
            let e: f64 = rng.sample(StandardNormal);
            *v = (keep * *v as f64 + fresh_sd * e) as f32;
        }
    }
    Ok(out)
}

/// `(blend coefficient, fresh-noise variance)` for a reuse ratio.
pub fn pns_coefficients(alpha: f64) -> (f64, f64) {
    let d = 1.0 + alpha * alpha;
    (alpha / d.sqrt(), 1.0 / d)
}

/// Guided step levels `t` (in `1..=steps`) for every frame. The state
/// replaced is the one the step produces, level `t - 1`.
pub fn dsg_guided_steps(
    frames: usize,
    prompt_frames: usize,
    beta: f64,
    steps: usize,
) -> Result<BTreeMap<usize, BTreeSet<usize>>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    if beta > 0.0 && prompt_frames == 0 {
        return Err(Error::invalid("beta > 0 needs at least one prompt frame"));
    }
    if prompt_frames > frames {
        return Err(Error::invalid(format!(
            "prompt frames ({prompt_frames}) exceed clip length ({frames})"
        )));
    }
    let s = steps as f64;
    let mut out = BTreeMap::new();
    for j in 0..frames {
        let mut set = BTreeSet::new();
        if beta > 0.0 && j < prompt_frames {
            let threshold = (1.0 - beta) * s + beta * s * j as f64 / prompt_frames as f64;
            set.extend((1..=steps).filter(|&t| t as f64 > threshold + THRESHOLD_TOL));
        }
        out.insert(j, set);
    }
    Ok(out)
}

/// Copies reversed frames of the previous clip's trajectory into the
/// guided `(level, frame)` slots.
struct StagedGuidance<'a> {
    prev: &'a DenoisingTrajectory,
    frames: usize,
    slots: BTreeSet<(usize, usize)>,
}

impl<'a> StagedGuidance<'a> {
    fn new(prev: &'a DenoisingTrajectory, guided: &BTreeMap<usize, BTreeSet<usize>>, frames: usize) -> Self {
        let slots = guided
            .iter()
            .flat_map(|(&j, ts)| ts.iter().map(move |&t| (t - 1, j)))
            .collect();
        StagedGuidance { prev, frames, slots }
    }
}

impl LatentInjector for StagedGuidance<'_> {
    fn inject(&self, level: usize, frame: usize) -> Option<&[f32]> {
        if !self.slots.contains(&(level, frame)) {
            return None;
        }
        self.prev.frame(level, self.frames - 1 - frame)
    }

    fn levels(&self) -> Vec<usize> {
        let l: BTreeSet<usize> = self.slots.iter().map(|(l, _)| *l).collect();
        l.into_iter().collect()
    }
}

fn standard_normal(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Clip {
    let [f, c, h, w] = shape;
    let mut clip = Clip::zeros(f, c, h, w);
    for v in &mut clip.data {
        let e: f64 = rng.sample(StandardNormal);
        *v = e as f32;
    }
    clip
}

/// Generates `num_clips` clips of `frames x frame_shape` latents.
///
/// Random draws come from one ChaCha8 generator per clip (stream = clip
/// index), so a clip's noise does not depend on how many draws earlier
/// clips made.
pub fn generate_long_video(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    frame_shape: [usize; 3],
    config: &LongVideoConfig,
) -> Result<LongVideoResult> {
    config.validate()?;
    config.sampler.validate(schedule.len())?;
    let [c, h, w] = frame_shape;
    if c * h * w == 0 {
        return Err(Error::invalid(format!("empty frame shape {frame_shape:?}")));
    }
    let n = config.frames;
    let steps = config.sampler.num_inference_steps;
    let guided = dsg_guided_steps(n, config.prompt_frames, config.beta, steps)?;
    let stream_rng = |i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        rng
    };

    let mut clips = Vec::with_capacity(config.num_clips);
    let mut initial = Vec::with_capacity(config.num_clips);
    let mut kept = Vec::new();
    let mut prev: Option<DenoisingTrajectory> = None;
    for i in 0..config.num_clips {
        let mut rng = stream_rng(i);
        let noise = match initial.last() {
            None => standard_normal([n, c, h, w], &mut rng),
            Some(p) => pns_perturb(&fnr_init(p)?, config.prompt_frames, config.alpha, &mut rng)?,
        };
        let last = i + 1 == config.num_clips;
        let mut cfg = config.sampler.clone();
        cfg.record_trajectory = !last || config.keep_trajectories || cfg.record_trajectory;
        let injector = prev.as_ref().map(|p| StagedGuidance::new(p, &guided, n));
        let out = sample_clip(
            model,
            schedule,
            cond,
            &noise,
            &cfg,
            injector.as_ref().map(|g| g as &dyn LatentInjector),
            i,
        )?;
        log::debug!("clip {i} of {} sampled", config.num_clips);
        clips.push(out.z0);
        initial.push(noise);
        if let Some(p) = prev.take() {
            if config.keep_trajectories {
                kept.push(p);
            }
        }
        prev = out.trajectory;
    }
    kept.extend(prev);
    Ok(LongVideoResult {
        clips,
        initial_noise: initial,
        trajectories: kept,
        config: config.clone(),
        metrics_digest: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticDenoiser, GaussianWorld};
    use crate::schedule::ScheduleProfile;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::new(1000, ScheduleProfile::default()).unwrap()
    }

    fn analytic() -> AnalyticDenoiser {
        AnalyticDenoiser::new(GaussianWorld::new(0.5, 0.1).unwrap(), schedule())
    }

    fn numbered(frames: usize) -> Clip {
        let mut c = Clip::zeros(frames, 1, 1, 2);
        for (i, v) in c.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        c
    }

    fn config(m: usize, alpha: f64, beta: f64, clips: usize) -> LongVideoConfig {
        LongVideoConfig {
            frames: 8,
            prompt_frames: m,
            alpha,
            beta,
            num_clips: clips,
            sampler: SamplerConfig {
                num_inference_steps: 20,
                guidance_scale: 1.0,
                ..SamplerConfig::default()
            },
            seed: 5,
            keep_trajectories: true,
        }
    }

    #[test]
    fn reversal_indexes_and_involutes() {
        let x = numbered(8);
        let r = fnr_init(&x).unwrap();
        assert_eq!(r.frame(0), x.frame(7));
        assert_eq!(r.frame(3), x.frame(4));
        assert_eq!(fnr_init(&r).unwrap(), x);
        let one = numbered(1);
        assert_eq!(fnr_init(&one).unwrap(), one);
        assert!(fnr_init(&Clip::zeros(0, 1, 1, 1)).is_err());
    }

    #[test]
    fn blend_coefficients() {
        let (k, v) = pns_coefficients(4.0);
        assert!((k - 0.970_142_500_145_332).abs() < 1e-12);
        assert!((v - 1.0 / 17.0).abs() < 1e-15);
        assert_eq!(pns_coefficients(0.0), (0.0, 1.0));
    }

    #[test]
    fn perturbation_keeps_prompt_frames_and_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = [4, 1, 250, 200];
        let x = standard_normal(shape, &mut rng);
        for alpha in [0.0, 1.0, 4.0] {
            let y = pns_perturb(&x, 2, alpha, &mut rng).unwrap();
            assert_eq!(y.frame(0), x.frame(0));
            assert_eq!(y.frame(1), x.frame(1));
            let tail = &y.data[2 * y.frame_len()..];
            let n = tail.len() as f64;
            assert!(n >= 1e5);
            let mean = tail.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = tail.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            assert!((var - 1.0).abs() < 0.02, "alpha {alpha}: var {var}");
            assert!(mean.abs() < 0.01);
        }
        assert!(pns_perturb(&x, 2, -1.0, &mut rng).is_err());
        assert!(pns_perturb(&x, 5, 1.0, &mut rng).is_err());
    }

    #[test]
    fn zero_alpha_discards_previous_noise() {
        let x = Clip::filled(3, 1, 1, 4, 1e6);
        let y = pns_perturb(&x, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(y.data[4..].iter().all(|v| v.abs() < 10.0));
    }

    #[test]
    fn staging_counts() {
        let g = dsg_guided_steps(8, 4, 0.4, 50).unwrap();
        assert_eq!(g[&0].len(), 20);
        assert_eq!(g[&0].iter().min(), Some(&31));
        assert_eq!(g[&2].len(), 10);
        assert_eq!(g[&2].iter().min(), Some(&41));
        assert_eq!(g[&4].len(), 0);
        for j in 0..7 {
            assert!(g[&j].len() >= g[&(j + 1)].len());
        }
        assert!(dsg_guided_steps(8, 4, 0.0, 50).unwrap().values().all(|s| s.is_empty()));
        let full = dsg_guided_steps(8, 8, 1.0, 50).unwrap();
        assert_eq!(full[&0], (1..=50).collect());
        assert!(dsg_guided_steps(8, 0, 0.3, 50).is_err());
        assert!(dsg_guided_steps(8, 2, 1.5, 50).is_err());
        assert!(dsg_guided_steps(8, 0, 0.0, 50).unwrap().values().all(|s| s.is_empty()));
    }

    #[test]
    fn staging_threshold_is_snapped() {
        // (1 - 0.7) * 10 evaluates to 3.0000000000000004; t = 3 must stay unguided either way
        let g = dsg_guided_steps(4, 1, 0.7, 10).unwrap();
        assert_eq!(g[&0], (4..=10).collect());
    }

    #[test]
    fn single_clip_is_plain_sampling() {
        let m = analytic();
        let cfg = config(4, 4.0, 0.4, 1);
        let cond = Conditioning::null(1);
        let r = generate_long_video(&m, &schedule(), &cond, [1, 2, 2], &cfg).unwrap();
        assert_eq!(r.clips.len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let noise = standard_normal([8, 1, 2, 2], &mut rng);
        let plain = sample_clip(&m, &schedule(), &cond, &noise, &cfg.sampler, None, 0).unwrap();
        assert_eq!(r.clips[0], plain.z0);
        assert_eq!(r.initial_noise[0], noise);
    }

    #[test]
    fn reversal_is_exact_and_full_guidance_copies() {
        let m = analytic();
        let cfg = config(8, 2.0, 1.0, 3);
        let r = generate_long_video(&m, &schedule(), &Conditioning::null(1), [1, 2, 2], &cfg).unwrap();
        assert_eq!(r.trajectories.len(), 3);
        let guided = dsg_guided_steps(8, 8, 1.0, 20).unwrap();
        for i in 1..3 {
            let prev = &r.trajectories[i - 1];
            let cur = &r.trajectories[i];
            for j in 0..8 {
                assert_eq!(r.initial_noise[i].frame(j), r.initial_noise[i - 1].frame(7 - j));
                for &t in &guided[&j] {
                    assert_eq!(cur.frame(t - 1, j), prev.frame(t - 1, 7 - j));
                }
            }
            assert_eq!(r.clips[i].frame(0), r.clips[i - 1].frame(7));
        }
    }

    #[test]
    fn prompt_noise_survives_partial_prompts() {
        let m = analytic();
        let cfg = config(3, 4.0, 0.4, 3);
        let r = generate_long_video(&m, &schedule(), &Conditioning::null(1), [1, 2, 2], &cfg).unwrap();
        for i in 1..3 {
            for j in 0..3 {
                assert_eq!(r.initial_noise[i].frame(j), r.initial_noise[i - 1].frame(7 - j));
            }
            assert_ne!(r.initial_noise[i].frame(3), r.initial_noise[i - 1].frame(4));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let m = analytic();
        let cfg = config(4, 4.0, 0.4, 3);
        let a = generate_long_video(&m, &schedule(), &Conditioning::null(1), [1, 2, 2], &cfg).unwrap();
        let b = generate_long_video(&m, &schedule(), &Conditioning::null(1), [1, 2, 2], &cfg).unwrap();
        assert_eq!(a.clips, b.clips);
        assert_eq!(a.trajectories, b.trajectories);
        let mut other = cfg.clone();
        other.seed = 6;
        let c = generate_long_video(&m, &schedule(), &Conditioning::null(1), [1, 2, 2], &other).unwrap();
        assert_ne!(a.clips, c.clips);
    }

    #[test]
    fn only_last_trajectory_kept_by_default() {
        let m = analytic();
        let mut cfg = config(4, 4.0, 0.4, 3);
        cfg.keep_trajectories = false;
        let r = generate_long_video(&m, &schedule(), &Conditioning::null(1), [1, 2, 2], &cfg).unwrap();
        assert_eq!(r.trajectories.len(), 1);
        assert_eq!(r.trajectories[0].clip_index, 2);
        assert_eq!(r.video().unwrap().frames, 24);
    }

    #[test]
    fn config_rejections() {
        let ok = config(4, 4.0, 0.4, 2);
        ok.validate().unwrap();
        let bad = [
            LongVideoConfig { prompt_frames: 9, ..ok.clone() },
            LongVideoConfig { alpha: -0.1, ..ok.clone() },
            LongVideoConfig { alpha: f64::NAN, ..ok.clone() },
            LongVideoConfig { beta: 1.1, ..ok.clone() },
            LongVideoConfig { prompt_frames: 0, ..ok.clone() },
            LongVideoConfig { num_clips: 0, ..ok.clone() },
            LongVideoConfig { frames: 0, prompt_frames: 0, beta: 0.0, ..ok.clone() },
        ];
        for b in bad {
            let e = b.validate().unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{b:?}");
        }
        LongVideoConfig { prompt_frames: 0, beta: 0.0, ..ok.clone() }.validate().unwrap();
        let m = analytic();
        let e = generate_long_video(&m, &schedule(), &Conditioning::null(1), [0, 2, 2], &ok);
        assert!(e.is_err());
    }
}
