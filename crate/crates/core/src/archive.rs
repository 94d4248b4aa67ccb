//! Binary tensor archives: checkpoints, latent dumps and trajectories.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 8 bytes   magic "CLPARC01"
//! 8 bytes   u64 header length in bytes
//! n bytes   UTF-8 JSON header (see `Header`)
//! rest      f32 payload, tensors concatenated in header order
//! ```
//!
//! Each tensor entry records its offset and length in f32 units. Parameter
//! tensors also record their group, and the header carries one sha256 per
//! group (the same digest `ParamStore::group_digest` computes), which is
//! re-checked on load. Frozen and trainable parameters therefore live in
//! separately digested sections.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, AutoencoderSpec};
use crate::clip::Clip;
use crate::denoiser::{DenoiserSpec, TinyVideoDenoiser};
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore, Tensor};
use crate::sampler::DenoisingTrajectory;
use crate::schedule::ScheduleProfile;

pub const MAGIC: &[u8; 8] = b"CLPARC01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<ParamGroup>,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    /// Group name to sha256 over that group's parameters.
    #[serde(default)]
    pub section_digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: Option<ParamGroup>,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Archive {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, group: Option<ParamGroup>, tensor: Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            group,
            tensor,
        });
    }

    pub fn from_params(kind: impl Into<String>, meta: serde_json::Value, params: &ParamStore) -> Self {
        let mut a = Archive::new(kind, meta);
        for (_, p) in params.iter() {
            a.push(p.name.clone(), Some(p.group), p.value.clone());
        }
        a
    }

    /// Parameter tensors in archive order.
    pub fn to_params(&self) -> Result<ParamStore> {
        let mut ps = ParamStore::new();
        for t in &self.tensors {
            let group = t
                .group
                .ok_or_else(|| Error::Format(format!("tensor {} has no parameter group", t.name)))?;
            ps.add(t.name.clone(), group, t.tensor.clone());
        }
        Ok(ps)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Format(format!("{} archive metadata: {e}", self.kind)))
    }

    fn section_digests(&self) -> BTreeMap<String, String> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            if let Some(g) = t.group {
                store.add(t.name.clone(), g, t.tensor.clone());
            }
        }
        store
            .groups()
            .into_iter()
            .map(|g| (g.name().to_string(), store.group_digest(g)))
            .collect()
    }

    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let len = t.tensor.data.len() as u64;
                let e = TensorEntry {
                    name: t.name.clone(),
                    group: t.group,
                    shape: t.tensor.shape.clone(),
                    offset,
                    len,
                };
                offset += len;
                e
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
            section_digests: self.section_digests(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let payload: usize = self.tensors.iter().map(|t| t.tensor.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a clipchain archive (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| Error::Format("archive header is truncated".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "archive format version {} is not supported",
                header.format_version
            )));
        }
        let payload = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let (start, len) = (e.offset as usize * 4, e.len as usize * 4);
            let raw = payload
                .get(start..start.saturating_add(len))
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the end of the archive", e.name)))?;
            if e.shape.iter().product::<usize>() != e.len as usize {
                return Err(Error::Format(format!("tensor {} shape does not match its length", e.name)));
            }
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(NamedTensor {
                name: e.name.clone(),
                group: e.group,
                tensor: Tensor::new(&e.shape, data),
            });
        }
        let archive = Archive {
            kind: header.kind,
            meta: header.meta,
            tensors,
        };
        let digests = archive.section_digests();
        if digests != header.section_digests {
            let bad: Vec<&String> = header
                .section_digests
                .iter()
                .filter(|(k, v)| digests.get(*k) != Some(*v))
                .map(|(k, _)| k)
                .collect();
            return Err(Error::DigestMismatch(format!("archive sections {bad:?} fail their digest")));
        }
        Ok(archive)
    }

    /// Writes through a temporary file and a rename, so readers never see
    /// a partial archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Archive::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} archive, found {}", self.kind)));
        }
        Ok(self)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Everything besides weights needed to rebuild and drive a denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub spec: DenoiserSpec,
    pub num_timesteps: usize,
    pub schedule: ScheduleProfile,
    /// Label vocabulary and seed of the label encoder.
    pub vocabulary: Vec<String>,
    pub label_seed: u64,
}

pub fn save_denoiser(path: &Path, model: &TinyVideoDenoiser, meta: &DenoiserMeta) -> Result<()> {
    Archive::from_params("denoiser", serde_json::to_value(meta)?, &model.params).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<(TinyVideoDenoiser, DenoiserMeta)> {
    let a = Archive::load(path)?.expect_kind("denoiser")?;
    let meta: DenoiserMeta = a.meta_as()?;
    let model = TinyVideoDenoiser::from_params(meta.spec.clone(), meta.num_timesteps, a.to_params()?)?;
    Ok((model, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderMeta {
    pub spec: AutoencoderSpec,
    /// Multiplier taking encoder output to roughly unit-variance diffusion latents.
    pub latent_scale: f32,
}

pub fn save_autoencoder(path: &Path, ae: &Autoencoder, latent_scale: f32) -> Result<()> {
    let meta = AutoencoderMeta {
        spec: ae.spec.clone(),
        latent_scale,
    };
    Archive::from_params("autoencoder", serde_json::to_value(meta)?, &ae.params).save(path)
}

pub fn load_autoencoder(path: &Path) -> Result<(Autoencoder, AutoencoderMeta)> {
    let a = Archive::load(path)?.expect_kind("autoencoder")?;
    let meta: AutoencoderMeta = a.meta_as()?;
    let ae = Autoencoder::from_params(meta.spec.clone(), a.to_params()?)?;
    Ok((ae, meta))
}

fn clip_tensor(c: &Clip) -> Tensor {
    Tensor::new(&[c.frames, c.channels, c.height, c.width], c.data.clone())
}

fn tensor_clip(t: &Tensor) -> Result<Clip> {
    match t.shape[..] {
        [f, c, h, w] => Clip::from_vec(f, c, h, w, t.data.clone()),
        _ => Err(Error::Format(format!("expected a [F, C, H, W] tensor, got {:?}", t.shape))),
    }
}

/// Clips stored as `clip{i}` tensors of one archive.
pub fn save_clips(path: &Path, kind: &str, meta: serde_json::Value, clips: &[Clip]) -> Result<()> {
    let mut a = Archive::new(kind, meta);
    for (i, c) in clips.iter().enumerate() {
        a.push(format!("clip{i}"), None, clip_tensor(c));
    }
    a.save(path)
}

pub fn load_clips(path: &Path, kind: &str) -> Result<(Vec<Clip>, serde_json::Value)> {
    let a = Archive::load(path)?.expect_kind(kind)?;
    let clips = a.tensors.iter().map(|t| tensor_clip(&t.tensor)).collect::<Result<_>>()?;
    Ok((clips, a.meta))
}

pub const TRAJECTORY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryMeta {
    trajectory_version: u32,
    clip_index: usize,
    config_hash: String,
    /// `[levels, F, C, H, W]`.
    shape: [usize; 5],
    levels: Vec<usize>,
    timesteps: Vec<Option<usize>>,
}

/// One clip's trajectory as a single `[levels, F, C, H, W]` tensor, level `S` first.
pub fn save_trajectory(path: &Path, traj: &DenoisingTrajectory) -> Result<()> {
    let first = traj
        .entries
        .first()
        .ok_or_else(|| Error::invalid("cannot store an empty trajectory"))?;
    let [f, c, h, w] = first.latents.shape();
    let meta = TrajectoryMeta {
        trajectory_version: TRAJECTORY_VERSION,
        clip_index: traj.clip_index,
        config_hash: traj.config_hash.clone(),
        shape: [traj.entries.len(), f, c, h, w],
        levels: traj.entries.iter().map(|e| e.level).collect(),
        timesteps: traj.entries.iter().map(|e| e.timestep).collect(),
    };
    let mut data = Vec::with_capacity(meta.shape.iter().product());
    for e in &traj.entries {
        first.latents.check_shape(&e.latents)?;
        data.extend_from_slice(&e.latents.data);
    }
    let mut a = Archive::new("trajectory", serde_json::to_value(&meta)?);
    a.push("latents", None, Tensor::new(&meta.shape, data));
    a.save(path)
}

pub fn load_trajectory(path: &Path) -> Result<DenoisingTrajectory> {
    let a = Archive::load(path)?.expect_kind("trajectory")?;
    let meta: TrajectoryMeta = a.meta_as()?;
    if meta.trajectory_version != TRAJECTORY_VERSION {
        return Err(Error::Format(format!(
            "trajectory version {} is not supported",
            meta.trajectory_version
        )));
    }
    let t = a
        .get("latents")
        .ok_or_else(|| Error::Format("trajectory archive has no latents".into()))?;
    let [n, f, c, h, w] = meta.shape;
    if t.shape != meta.shape || meta.levels.len() != n || meta.timesteps.len() != n {
        return Err(Error::Format("trajectory shape header disagrees with its data".into()));
    }
    let per = f * c * h * w;
    let entries = (0..n)
        .map(|i| {
            Ok(crate::sampler::TrajectoryEntry {
                level: meta.levels[i],
                timestep: meta.timesteps[i],
                latents: Clip::from_vec(f, c, h, w, t.data[i * per..(i + 1) * per].to_vec())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DenoisingTrajectory {
        clip_index: meta.clip_index,
        entries,
        config_hash: meta.config_hash,
    })
}
