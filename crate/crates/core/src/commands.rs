//! End-to-end commands behind the `clipchain` binary.
//!
//! Each command reads its inputs, writes its outputs into one directory,
//! and seals a [`RunManifest`] there. Layout of the directories:
//!
//! ```text
//! dataset/   dataset.json, clips/clip{i:03}.clpa, [frames/]   (gen-data)
//! ae/        autoencoder.ckpt, ae_loss.json                    (train-ae)
//! ft/        autoencoder.ckpt, finetune_report.json            (finetune-decoder)
//! model/     denoiser.ckpt, loss.json                          (train)
//! run/       frames/, latents.clpa, initial_noise.clpa,
//!            trajectory.clpa, metrics.json                     (generate)
//! ```
//!
//! `metrics.json` is written after the manifest is sealed and carries the
//! manifest digest, so it is not itself listed as an output.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{
    load_autoencoder, load_clips, load_denoiser, save_autoencoder, save_clips, save_denoiser, save_trajectory,
    write_atomic, DenoiserMeta,
};
use crate::autoencoder::{finetune_decoder, pretrain, Autoencoder, FinetuneReport, PatchDiscriminator};
use crate::clip::{Clip, PixelClip};
use crate::config::{Config, DataMode, GenerateConfig, TrainMode};
use crate::datakit::{build_dataset, make_pseudo_video, regenerate, Captioner, DatasetManifest, MockClient, ZoomPanSpec};
use crate::denoiser::{
    train, training_loss, AnalyticDenoiser, Denoiser, GaussianWorld, LabelEncoder, TinyVideoDenoiser, TrainingSet,
};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::frames::{read_ppm, read_video, write_video, INDEX_FILE};
use crate::longvideo::generate_long_video;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::metrics::{evaluate, MetricSpace, MetricsReport};
use crate::schedule::NoiseSchedule;

pub const DATASET_FILE: &str = "dataset.json";
pub const CLIPS_DIR: &str = "clips";
pub const FRAMES_DIR: &str = "frames";
pub const AUTOENCODER_FILE: &str = "autoencoder.ckpt";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const LOSS_FILE: &str = "loss.json";
pub const LATENTS_FILE: &str = "latents.clpa";
pub const NOISE_FILE: &str = "initial_noise.clpa";
pub const TRAJECTORY_FILE: &str = "trajectory.clpa";
pub const METRICS_FILE: &str = "metrics.json";

pub const DATASET_VERSION: u32 = 1;

/// Where a pseudo-video clip came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSource {
    pub image_sha256: String,
    pub zoom: ZoomPanSpec,
}

/// Index of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub mode: DataMode,
    /// Clip files relative to the dataset directory, one clip each.
    pub clips: Vec<String>,
    pub labels: Vec<String>,
    pub moving_shapes: Option<DatasetManifest>,
    pub pseudo_video: Option<PseudoSource>,
}

fn clip_file(i: usize) -> String {
    format!("{CLIPS_DIR}/clip{i:03}.clpa")
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(v)?)
}

fn write_dataset(out: &Path, clips: &[PixelClip], index: &DatasetIndex, mut m: RunManifest) -> Result<RunManifest> {
    fs::create_dir_all(out.join(CLIPS_DIR))?;
    for (i, c) in clips.iter().enumerate() {
        save_clips(&out.join(clip_file(i)), "clip", serde_json::json!({ "label": index.labels[i] }), std::slice::from_ref(c))?;
        m.add_output(out, &clip_file(i))?;
    }
    write_json(&out.join(DATASET_FILE), index)?;
    m.add_output(out, DATASET_FILE)?;
    m.write(out)
}

/// Generates a dataset as configured in `cfg.data`.
pub fn cmd_gen_data(cfg: &Config, out: &Path) -> Result<RunManifest> {
    let d = &cfg.data;
    let mut m = RunManifest::new("gen-data", to_json(d)?);
    match d.mode {
        DataMode::MovingShapes => {
            let spec = d.shapes_spec();
            let mock = d.captioner.as_deref().map(MockClient::from_file).transpose()?;
            if let Some(p) = &d.captioner {
                m.add_input(p)?;
            }
            let policy = d.caption_policy();
            let captioner = mock.as_ref().map(|c| (c as &dyn Captioner, &policy));
            let (clips, manifest) = build_dataset(&spec, &d.seeds(), captioner)?;
            let index = DatasetIndex {
                format_version: DATASET_VERSION,
                mode: d.mode,
                clips: (0..clips.len()).map(clip_file).collect(),
                labels: manifest.items.iter().map(|i| i.label.clone()).collect(),
                moving_shapes: Some(manifest),
                pseudo_video: None,
            };
            write_dataset(out, &clips, &index, m)
        }
        DataMode::PseudoVideo => {
            let path = d
                .image
                .as_deref()
                .ok_or_else(|| Error::Config("pseudo_video mode needs data.image".into()))?;
            let image = read_ppm(path)?;
            m.add_input(path)?;
            let zoom = d.zoom_spec(image.height, image.width);
            let clip = make_pseudo_video(&image, &zoom)?;
            write_video(&out.join(FRAMES_DIR), std::slice::from_ref(&clip))?;
            m.add_output(out, &format!("{FRAMES_DIR}/{INDEX_FILE}"))?;
            let index = DatasetIndex {
                format_version: DATASET_VERSION,
                mode: d.mode,
                clips: vec![clip_file(0)],
                labels: vec!["pseudo video".into()],
                moving_shapes: None,
                pseudo_video: Some(PseudoSource {
                    image_sha256: sha256_hex(&fs::read(path)?),
                    zoom,
                }),
            };
            write_dataset(out, &[clip], &index, m)
        }
    }
}

/// Rebuilds a moving-shapes dataset from its `dataset.json`, checking
/// every clip digest on the way.
pub fn cmd_replay_data(dataset_json: &Path, out: &Path) -> Result<RunManifest> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(dataset_json)?)?;
    let manifest = index
        .moving_shapes
        .clone()
        .ok_or_else(|| Error::Config("only moving-shapes datasets can be replayed from their index".into()))?;
    let clips = regenerate(&manifest)?;
    let mut m = RunManifest::new("gen-data", to_json(&manifest)?);
    m.add_input(dataset_json)?;
    write_dataset(out, &clips, &index, m)
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<PixelClip>, DatasetIndex)> {
    let p = dir.join(DATASET_FILE);
    let bytes = fs::read(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    let index: DatasetIndex = serde_json::from_slice(&bytes)?;
    if index.format_version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {} is not supported", index.format_version)));
    }
    if index.labels.len() != index.clips.len() {
        return Err(Error::Data("dataset index has one label per clip".into()));
    }
    let clips = index
        .clips
        .iter()
        .map(|f| {
            let (mut c, _) = load_clips(&dir.join(f), "clip")?;
            c.pop().ok_or_else(|| Error::Data(format!("{f} holds no clip")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, index))
}

/// Encoder output multiplier giving unit mean-square latents.
pub fn latent_scale(ae: &Autoencoder, clips: &[PixelClip]) -> Result<f32> {
    let (mut s, mut n) = (0.0f64, 0usize);
    for c in clips {
        let z = ae.encode(c)?;
        s += z.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        n += z.data.len();
    }
    let rms = (s / n.max(1) as f64).sqrt();
    if !(rms > 0.0 && rms.is_finite()) {
        return Err(Error::NonFinite(format!("latent RMS is {rms}")));
    }
    Ok((1.0 / rms) as f32)
}

fn encode_scaled(ae: &Autoencoder, scale: f32, clips: &[PixelClip]) -> Result<Vec<Clip>> {
    clips
        .iter()
        .map(|c| {
            let mut z = ae.encode(c)?;
            z.data.iter_mut().for_each(|v| *v *= scale);
            Ok(z)
        })
        .collect()
}

/// Pretrains the autoencoder and fixes its latent scale.
pub fn cmd_train_ae(cfg: &Config, data: &Path, out: &Path) -> Result<RunManifest> {
    let a = &cfg.autoencoder;
    let spec = a.spec();
    spec.validate()?;
    let (clips, _) = load_dataset(data)?;
    let mut m = RunManifest::new("train-ae", to_json(a)?);
    m.add_input(&data.join(DATASET_FILE))?;
    let mut ae = Autoencoder::new(spec, a.seed)?;
    let losses = pretrain(&mut ae, &clips, &a.pretrain())?;
    let scale = latent_scale(&ae, &clips)?;
    fs::create_dir_all(out)?;
    save_autoencoder(&out.join(AUTOENCODER_FILE), &ae, scale)?;
    write_json(&out.join("ae_loss.json"), &serde_json::json!({ "losses": losses, "latent_scale": scale }))?;
    m.add_output(out, AUTOENCODER_FILE)?;
    m.add_output(out, "ae_loss.json")?;
    m.write(out)
}

/// Adds temporal layers to the decoder (if it has none) and fine-tunes them.
pub fn cmd_finetune_decoder(cfg: &Config, data: &Path, autoencoder: &Path, out: &Path) -> Result<(RunManifest, FinetuneReport)> {
    let f = &cfg.finetune;
    let ft = f.finetune();
    ft.weights.validate()?;
    let (clips, _) = load_dataset(data)?;
    let (mut ae, meta) = load_autoencoder(autoencoder)?;
    let mut m = RunManifest::new("finetune-decoder", to_json(f)?);
    m.add_input(&data.join(DATASET_FILE))?;
    m.add_input(autoencoder)?;
    if !ae.has_temporal_layers() {
        ae.inject_temporal(&f.temporal_layers(), f.seed)?;
    }
    let mut disc = PatchDiscriminator::new(ae.spec.image_channels, f.disc_hidden, f.seed ^ 0xd15c);
    let report = finetune_decoder(&mut ae, &mut disc, &clips, &ft, |step, s| {
        if step % 50 == 0 {
            log::info!("finetune step {step}: total {:.5} rec {:.5} adv {:.4}", s.total, s.rec, s.adv);
        }
    })?;
    fs::create_dir_all(out)?;
    save_autoencoder(&out.join(AUTOENCODER_FILE), &ae, meta.latent_scale)?;
    write_json(&out.join("finetune_report.json"), &report)?;
    m.add_output(out, AUTOENCODER_FILE)?;
    m.add_output(out, "finetune_report.json")?;
    Ok((m.write(out)?, report))
}

/// Loss-curve file written by [`cmd_train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossFile {
    pub losses: Vec<f32>,
    /// Held-out objective of the trained model (Gaussian-world mode).
    pub eval_loss: Option<f64>,
    /// Same objective, same draws, for the Bayes-optimal denoiser.
    pub analytic_loss: Option<f64>,
}

/// Mean denoising loss over `batches` seeded batches.
pub fn eval_loss(
    model: &dyn Denoiser,
    clips: &[Clip],
    conds: &[crate::denoiser::Conditioning],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    batches: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..batches {
        total += training_loss(model, clips, conds, schedule, p_uncond, &mut rng)?;
    }
    Ok(total / batches.max(1) as f64)
}

/// Trains the denoiser. Latent mode needs a dataset and an autoencoder.
pub fn cmd_train(cfg: &Config, data: Option<&Path>, autoencoder: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let d = &cfg.denoiser;
    let schedule = NoiseSchedule::new(d.num_timesteps, d.schedule.clone())?;
    let mut m = RunManifest::new("train", to_json(&(d, &cfg.data, &cfg.autoencoder))?);
    let (clips, labels) = match d.mode {
        TrainMode::Latent => {
            let (data, ae_path) = data
                .zip(autoencoder)
                .ok_or_else(|| Error::Config("latent training needs --data and --autoencoder".into()))?;
            let (pixels, index) = load_dataset(data)?;
            let (ae, meta) = load_autoencoder(ae_path)?;
            m.add_input(&data.join(DATASET_FILE))?;
            m.add_input(ae_path)?;
            (encode_scaled(&ae, meta.latent_scale, &pixels)?, index.labels)
        }
        TrainMode::GaussianWorld => {
            let world = GaussianWorld::new(d.gaussian_mu, d.gaussian_std).map_err(|e| Error::Config(e.to_string()))?;
            let f = cfg.data.frames;
            let (c, h, w) = (
                cfg.autoencoder.latent_channels,
                cfg.data.height / cfg.autoencoder.downsample_factor.max(1),
                cfg.data.width / cfg.autoencoder.downsample_factor.max(1),
            );
            let mut rng = ChaCha8Rng::seed_from_u64(d.seed ^ 0x6a05);
            let clips = (0..d.gaussian_clips).map(|_| world.sample([f, c, h, w], &mut rng)).collect();
            (clips, vec!["gaussian".to_string(); d.gaussian_clips])
        }
    };
    let vocabulary: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let encoder = LabelEncoder::new(vocabulary.clone(), d.cond_dim, d.label_seed);
    let conds = labels.iter().map(|l| encoder.encode(l)).collect::<Result<Vec<_>>>()?;
    let set = TrainingSet::new(clips, conds)?;
    let mut model = TinyVideoDenoiser::new(d.spec(set.shape()), d.num_timesteps, d.seed)?;
    let report = train(&mut model, &set, &schedule, &d.train(), |step, loss| {
        if step % 100 == 0 {
            log::info!("train step {step}: loss {loss:.5}");
        }
    })?;
    let (eval, analytic) = match d.mode {
        TrainMode::GaussianWorld => {
            let world = GaussianWorld::new(d.gaussian_mu, d.gaussian_std)?;
            let oracle = AnalyticDenoiser::new(world, schedule.clone());
            let seed = d.seed ^ 0xe7a1;
            (
                Some(eval_loss(&model, &set.clips, &set.conds, &schedule, d.p_uncond, d.eval_batches, seed)?),
                Some(eval_loss(&oracle, &set.clips, &set.conds, &schedule, d.p_uncond, d.eval_batches, seed)?),
            )
        }
        TrainMode::Latent => (None, None),
    };
    fs::create_dir_all(out)?;
    let meta = DenoiserMeta {
        spec: model.spec.clone(),
        num_timesteps: d.num_timesteps,
        schedule: d.schedule.clone(),
        vocabulary,
        label_seed: d.label_seed,
    };
    save_denoiser(&out.join(DENOISER_FILE), &model, &meta)?;
    write_json(
        &out.join(LOSS_FILE),
        &LossFile {
            losses: report.losses,
            eval_loss: eval,
            analytic_loss: analytic,
        },
    )?;
    m.add_output(out, DENOISER_FILE)?;
    m.add_output(out, LOSS_FILE)?;
    m.write(out)
}

#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub checkpoint: PathBuf,
    pub autoencoder: Option<PathBuf>,
    pub generate: GenerateConfig,
    /// Rayon worker threads; `None` uses the global pool. Output does not
    /// depend on it.
    pub workers: Option<usize>,
}

/// Metrics of a generated run, in latent space and (if frames exist) pixel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_digest: String,
    pub latent: MetricsReport,
    pub pixel: Option<MetricsReport>,
}

/// Generates a long video and writes frames, latents, the last clip's
/// trajectory, the manifest and metrics into `out`.
pub fn cmd_generate(req: &GenerateRequest, out: &Path) -> Result<(RunManifest, RunMetrics)> {
    let lv = req.generate.long_video();
    lv.validate()?;
    if req.workers == Some(0) {
        return Err(Error::Config("--workers must be >= 1".into()));
    }
    let (model, meta) = load_denoiser(&req.checkpoint)?;
    lv.sampler.validate(meta.num_timesteps)?;
    if lv.frames > model.spec.frames {
        return Err(Error::Config(format!(
            "{} frames per clip exceed the model's maximum of {}",
            lv.frames, model.spec.frames
        )));
    }
    let ae = req.autoencoder.as_deref().map(load_autoencoder).transpose()?;
    if let Some((a, _)) = &ae {
        if a.spec.latent_channels != model.spec.channels {
            return Err(Error::Config("autoencoder latent channels differ from the denoiser's".into()));
        }
    }
    let label = match &req.generate.label {
        Some(l) => l.clone(),
        None => meta
            .vocabulary
            .first()
            .cloned()
            .ok_or_else(|| Error::Data("checkpoint has an empty label vocabulary".into()))?,
    };
    let cond = LabelEncoder::new(meta.vocabulary.clone(), model.spec.cond_dim, meta.label_seed)
        .encode(&label)
        .map_err(|e| Error::Config(e.to_string()))?;
    let schedule = NoiseSchedule::new(meta.num_timesteps, meta.schedule.clone())?;

    let mut record = req.generate.clone();
    record.label = Some(label);
    let mut m = RunManifest::new("generate", to_json(&record)?);
    m.add_input(&req.checkpoint)?;
    if let Some(p) = &req.autoencoder {
        m.add_input(p)?;
    }

    let frame_shape = [model.spec.channels, model.spec.height, model.spec.width];
    let run = || generate_long_video(&model, &schedule, &cond, frame_shape, &lv);
    let result = match req.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };

    fs::create_dir_all(out)?;
    let run_meta = serde_json::json!({ "manifest": MANIFEST_FILE });
    save_clips(&out.join(LATENTS_FILE), "latents", run_meta.clone(), &result.clips)?;
    save_clips(&out.join(NOISE_FILE), "initial_noise", run_meta, &result.initial_noise)?;
    m.add_output(out, LATENTS_FILE)?;
    m.add_output(out, NOISE_FILE)?;
    if let Some(t) = result.trajectories.last() {
        save_trajectory(&out.join(TRAJECTORY_FILE), t)?;
        m.add_output(out, TRAJECTORY_FILE)?;
    }
    let pixels = match &ae {
        Some((a, am)) => Some(
            result
                .clips
                .iter()
                .map(|z| {
                    let mut z = z.clone();
                    z.data.iter_mut().for_each(|v| *v /= am.latent_scale);
                    a.decode(&z)
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None if model.spec.channels == 3 => Some(result.clips.clone()),
        None => {
            log::warn!("no autoencoder given and latents are not RGB; writing latents only");
            None
        }
    };
    if let Some(px) = &pixels {
        let index = write_video(&out.join(FRAMES_DIR), px)?;
        m.add_output(out, &format!("{FRAMES_DIR}/{INDEX_FILE}"))?;
        for e in &index.entries {
            m.add_output(out, &format!("{FRAMES_DIR}/{}", e.file))?;
        }
    }
    let m = m.write(out)?;
    let metrics = cmd_metrics(out)?;
    Ok((m, metrics))
}

/// Recomputes metrics of a generated run from its files and writes
/// `metrics.json`. Pixel metrics use the quantised frames on disk.
pub fn cmd_metrics(run: &Path) -> Result<RunMetrics> {
    let m = RunManifest::read(run)?;
    if m.compute_digest() != m.digest {
        return Err(Error::DigestMismatch(format!("{}/{MANIFEST_FILE}", run.display())));
    }
    let (latents, _) = load_clips(&run.join(LATENTS_FILE), "latents")?;
    let latent = evaluate(&latents, MetricSpace::Latent, Some(m.digest.clone()))?;
    let pixel = if run.join(FRAMES_DIR).join(INDEX_FILE).exists() {
        let (clips, _) = read_video(&run.join(FRAMES_DIR))?;
        Some(evaluate(&clips, MetricSpace::Pixel, Some(m.digest.clone()))?)
    } else {
        None
    };
    let report = RunMetrics {
        run_digest: m.digest,
        latent,
        pixel,
    };
    write_json(&run.join(METRICS_FILE), &report)?;
    Ok(report)
}
