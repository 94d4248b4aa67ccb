//! Clip-by-clip long-video generation over a pluggable diffusion denoiser.

pub mod archive;
pub mod autoencoder;
pub mod clip;
pub mod commands;
pub mod config;
pub mod datakit;
pub mod denoiser;
pub mod digest;
pub mod error;
pub mod frames;
pub mod longvideo;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;

pub use clip::{Clip, LatentClip, PixelClip};
pub use error::{Error, ErrorClass, Result};
pub use schedule::{NoiseSchedule, ScheduleProfile};
