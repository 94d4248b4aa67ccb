//! Run configuration, read from TOML.
//!
//! Every section and key is optional; missing keys take the defaults shown
//! by `clipchain print-config`. Unknown keys are rejected so typos fail
//! loudly. The defaults describe a desk-scale setup: 32x32 RGB clips of 8
//! frames, a 4x-downsampling autoencoder, and 8x8 latents. The reference
//! setting works at 256x256 pixels on a pretrained image model; nothing here
//! depends on that size except run time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{
    AutoencoderSpec, DecoderTemporalLayer, FinetuneConfig, FinetuneLossWeights, PretrainConfig,
};
use crate::datakit::{CaptionPolicy, MovingShapesSpec, Rect, ZoomPanSpec};
use crate::denoiser::{DenoiserSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::longvideo::LongVideoConfig;
use crate::nn::AdamConfig;
use crate::sampler::{SamplerConfig, TimestepSpacing};
use crate::schedule::ScheduleProfile;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    #[default]
    MovingShapes,
    /// Zoom/pan clip cut from one still image.
    PseudoVideo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mode: DataMode,
    pub num_clips: usize,
    /// Clip `i` is rendered from seed `seed_start + i`.
    pub seed_start: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Binary PPM source for `pseudo_video`.
    pub image: Option<PathBuf>,
    /// Crop rectangles at the first and last frame, in source pixels.
    /// Default: the full image, then its centred middle half.
    pub zoom_start: Option<Rect>,
    pub zoom_end: Option<Rect>,
    /// Mock captioner description (JSON); no captions if unset.
    pub captioner: Option<PathBuf>,
    pub caption_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mode: DataMode::MovingShapes,
            num_clips: 64,
            seed_start: 0,
            height: 32,
            width: 32,
            frames: 8,
            image: None,
            zoom_start: None,
            zoom_end: None,
            captioner: None,
            caption_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn shapes_spec(&self) -> MovingShapesSpec {
        MovingShapesSpec {
            height: self.height,
            width: self.width,
            frames: self.frames,
            ..MovingShapesSpec::default()
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.num_clips as u64).map(|i| self.seed_start + i).collect()
    }

    pub fn caption_policy(&self) -> CaptionPolicy {
        CaptionPolicy {
            seed: self.caption_seed,
            ..CaptionPolicy::default()
        }
    }

    /// Zoom/pan spec for a source image of the given size.
    pub fn zoom_spec(&self, src_height: usize, src_width: usize) -> ZoomPanSpec {
        let (h, w) = (src_height as f64, src_width as f64);
        ZoomPanSpec {
            start: self.zoom_start.unwrap_or(Rect::full(src_height, src_width)),
            end: self.zoom_end.unwrap_or(Rect {
                x: w / 4.0,
                y: h / 4.0,
                w: w / 2.0,
                h: h / 2.0,
            }),
            frames: self.frames,
            out_height: self.height,
            out_width: self.width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub reg_weight: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        let s = AutoencoderSpec::default();
        let p = PretrainConfig::default();
        AutoencoderConfig {
            downsample_factor: s.downsample_factor,
            latent_channels: s.latent_channels,
            hidden: s.hidden,
            steps: p.steps,
            batch_size: p.batch_size,
            lr: 5e-3,
            reg_weight: p.reg_weight,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub fn spec(&self) -> AutoencoderSpec {
        AutoencoderSpec {
            downsample_factor: self.downsample_factor,
            latent_channels: self.latent_channels,
            hidden: self.hidden,
            ..AutoencoderSpec::default()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            reg_weight: self.reg_weight,
            adam: AdamConfig {
                lr: self.lr as f32,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch_size: usize,
    pub a_rec: f64,
    pub a_reg: f64,
    pub a_disc: f64,
    pub latent_jitter: f64,
    pub disc_steps: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub disc_hidden: usize,
    /// Decoder levels that receive a temporal block (0 = latent resolution).
    pub temporal_levels: Vec<usize>,
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        FinetuneSection {
            steps: f.steps,
            batch_size: f.batch_size,
            a_rec: f.weights.a_rec,
            a_reg: f.weights.a_reg,
            a_disc: f.weights.a_disc,
            latent_jitter: f.latent_jitter,
            disc_steps: f.disc_steps,
            lr: 3e-3,
            disc_lr: 1e-3,
            disc_hidden: 8,
            temporal_levels: AutoencoderSpec::default_temporal_layers().iter().map(|l| l.level).collect(),
            seed: 0,
        }
    }
}

impl FinetuneSection {
    pub fn finetune(&self) -> FinetuneConfig {
        let d = FinetuneConfig::default();
        FinetuneConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            weights: FinetuneLossWeights {
                a_rec: self.a_rec,
                a_reg: self.a_reg,
                a_disc: self.a_disc,
            },
            latent_jitter: self.latent_jitter,
            disc_steps: self.disc_steps,
            adam: AdamConfig {
                lr: self.lr as f32,
                ..d.adam
            },
            disc_adam: AdamConfig {
                lr: self.disc_lr as f32,
                ..d.disc_adam
            },
            seed: self.seed,
        }
    }

    pub fn temporal_layers(&self) -> Vec<DecoderTemporalLayer> {
        self.temporal_levels
            .iter()
            .map(|&level| DecoderTemporalLayer { level, zero_init: true })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Train on autoencoder latents of a generated dataset.
    #[default]
    Latent,
    /// Train on i.i.d. Gaussian clips whose optimal denoiser is known.
    GaussianWorld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub mode: TrainMode,
    pub num_timesteps: usize,
    pub schedule: ScheduleProfile,
    pub hidden: usize,
    pub hidden2: usize,
    pub cond_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub seed: u64,
    pub label_seed: u64,
    /// Gaussian-world mean and std, and how many clips to draw.
    pub gaussian_mu: f64,
    pub gaussian_std: f64,
    pub gaussian_clips: usize,
    /// Batches used to estimate the final and the analytic loss.
    pub eval_batches: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        let s = DenoiserSpec::default();
        let t = TrainConfig::default();
        DenoiserConfig {
            mode: TrainMode::Latent,
            num_timesteps: 1000,
            schedule: ScheduleProfile::default(),
            hidden: s.hidden,
            hidden2: s.hidden2,
            cond_dim: s.cond_dim,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: 2e-3,
            p_uncond: t.p_uncond,
            seed: 0,
            label_seed: 0,
            gaussian_mu: 0.5,
            gaussian_std: 0.1,
            gaussian_clips: 64,
            eval_batches: 64,
        }
    }
}

impl DenoiserConfig {
    /// Spec for clips of the given `[frames, channels, height, width]`.
    pub fn spec(&self, shape: [usize; 4]) -> DenoiserSpec {
        let [frames, channels, height, width] = shape;
        DenoiserSpec {
            frames,
            channels,
            height,
            width,
            hidden: self.hidden,
            hidden2: self.hidden2,
            cond_dim: self.cond_dim,
            ..DenoiserSpec::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            p_uncond: self.p_uncond,
            adam: AdamConfig {
                lr: self.lr as f32,
                ..AdamConfig::default()
            },
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Long-video generation; every key can be overridden by a CLI flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub clips: usize,
    pub frames: usize,
    pub prompt_frames: usize,
    pub alpha: f64,
    pub beta: f64,
    pub guidance: f64,
    pub steps: usize,
    pub spacing: TimestepSpacing,
    pub seed: u64,
    pub label: Option<String>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let l = LongVideoConfig::default();
        GenerateConfig {
            clips: l.num_clips,
            frames: l.frames,
            prompt_frames: l.prompt_frames,
            alpha: l.alpha,
            beta: l.beta,
            guidance: l.sampler.guidance_scale,
            steps: l.sampler.num_inference_steps,
            spacing: l.sampler.spacing,
            seed: 0,
            label: None,
        }
    }
}

impl GenerateConfig {
    pub fn long_video(&self) -> LongVideoConfig {
        LongVideoConfig {
            frames: self.frames,
            prompt_frames: self.prompt_frames,
            alpha: self.alpha,
            beta: self.beta,
            num_clips: self.clips,
            sampler: SamplerConfig {
                num_inference_steps: self.steps,
                spacing: self.spacing,
                guidance_scale: self.guidance,
                eta: 0.0,
                record_trajectory: true,
            },
            seed: self.seed,
            keep_trajectories: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub format_version: u32,
    pub data: DataConfig,
    pub autoencoder: AutoencoderConfig,
    pub finetune: FinetuneSection,
    pub denoiser: DenoiserConfig,
    pub generate: GenerateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            format_version: CONFIG_VERSION,
            data: DataConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            finetune: FinetuneSection::default(),
            denoiser: DenoiserConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.format_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config format_version {} is not supported (expected {CONFIG_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serialises")
    }
}
