use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Partition used for freezing and for per-section digests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Encoder weights (autoencoder only).
    Encoder,
    /// Frame-wise spatial layers: the "3D-ResNet" path.
    Spatial,
    /// Timestep and conditioning projections.
    Embedding,
    /// Temp-Conv and Temp-Attn layers.
    Temporal,
    /// Patch discriminator used during decoder fine-tuning.
    Discriminator,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Spatial => "spatial",
            ParamGroup::Embedding => "embedding",
            ParamGroup::Temporal => "temporal",
            ParamGroup::Discriminator => "discriminator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform fan-in initialisation, `U(-sqrt(3/fan_in), sqrt(3/fan_in)) * gain`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        gain: f32,
        rng: &mut R,
    ) -> ParamId {
        let bound = (3.0 / fan_in as f32).sqrt() * gain;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, group, Tensor::new(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// SHA-256 over names, shapes and little-endian values of a group.
    pub fn group_digest(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            hash_param(&mut h, p);
        }
        hex::encode(h.finalize())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            hash_param(&mut h, p);
        }
        hex::encode(h.finalize())
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = self.params.iter().map(|p| p.group).collect();
        g.sort();
        g.dedup();
        g
    }
}

fn hash_param(h: &mut Sha256, p: &Param) {
    h.update(p.name.as_bytes());
    h.update([0u8]);
    for d in &p.value.shape {
        h.update((*d as u64).to_le_bytes());
    }
    for v in &p.value.data {
        h.update(v.to_le_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adam restricted to a set of trainable groups; other groups never move.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    trainable: Vec<ParamGroup>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig, trainable: &[ParamGroup]) -> Self {
        let m = store.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let v = store.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            cfg,
            trainable: trainable.to_vec(),
            m,
            v,
            step: 0,
        }
    }

    pub fn trainable(&self) -> &[ParamGroup] {
        &self.trainable
    }

    /// Applies one update. `grads` pairs are matched to parameters by id;
    /// gradients for frozen groups are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let active: Vec<&(ParamId, Tensor)> = grads
            .iter()
            .filter(|(id, _)| self.trainable.contains(&store.get(*id).group))
            .collect();
        let mut scale = 1.0f32;
        if self.cfg.clip_norm > 0.0 {
            let sq: f64 = active
                .iter()
                .flat_map(|(_, g)| g.data.iter())
                .map(|&x| (x as f64) * (x as f64))
                .sum();
            let norm = sq.sqrt() as f32;
            if norm > self.cfg.clip_norm {
                scale = self.cfg.clip_norm / norm;
            }
        }
        let b1t = 1.0 - self.cfg.beta1.powi(self.step);
        let b2t = 1.0 - self.cfg.beta2.powi(self.step);
        for (id, g) in active {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let w = &mut store.params[id.0].value.data;
            for k in 0..w.len() {
                let gk = g.data[k] * scale;
                m[k] = self.cfg.beta1 * m[k] + (1.0 - self.cfg.beta1) * gk;
                v[k] = self.cfg.beta2 * v[k] + (1.0 - self.cfg.beta2) * gk * gk;
                let mh = m[k] / b1t;
                let vh = v[k] / b2t;
                w[k] -= self.cfg.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }
}
