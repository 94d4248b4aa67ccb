//! Noise-prediction denoisers and their training loop.
//!
//! [`Denoiser`] is the contract the sampler drives: `predict_noise(z_t, t, c)`
//! returns an estimate of the noise that produced `z_t`. Two
//! implementations ship here: [`AnalyticDenoiser`], the exact posterior
//! mean for i.i.d. Gaussian data, and [`TinyVideoDenoiser`], a small
//! frame-batched conv net with injectable temporal layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clip::Clip;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::schedule::NoiseSchedule;

/// Condition vector `c` plus the classifier-free-guidance null flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub embedding: Vec<f32>,
    pub null_flag: bool,
}

impl Conditioning {
    pub fn new(embedding: Vec<f32>) -> Self {
        Conditioning {
            embedding,
            null_flag: false,
        }
    }

    /// The unconditional branch; embedding content is ignored by models.
    pub fn null(dim: usize) -> Self {
        Conditioning {
            embedding: vec![0.0; dim],
            null_flag: true,
        }
    }

    pub fn as_null(&self) -> Self {
        Conditioning::null(self.embedding.len())
    }
}

pub trait Denoiser: Sync {
    /// Number of diffusion timesteps the model was built for.
    fn num_timesteps(&self) -> usize;

    fn predict_noise(&self, z_t: &Clip, t: usize, cond: &Conditioning) -> Result<Clip>;
}

/// Data model with every element i.i.d. `N(mu, s^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianWorld {
    pub mu: f64,
    pub s: f64,
}

impl GaussianWorld {
    pub fn new(mu: f64, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite() && mu.is_finite()) {
            return Err(Error::invalid(format!("GaussianWorld needs s > 0, got {s}")));
        }
        Ok(GaussianWorld { mu, s })
    }

    pub fn sample<R: Rng>(&self, shape: [usize; 4], rng: &mut R) -> Clip {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                (self.mu + self.s * e) as f32
            })
            .collect();
        Clip::from_vec(shape[0], shape[1], shape[2], shape[3], data).expect("sized")
    }
}

/// Bayes-optimal noise predictor `E[eps | z_t]` for [`GaussianWorld`] data:
/// `sigma_bar_t (z_t - alpha_bar_t mu) / (alpha_bar_t^2 s^2 + sigma_bar_t^2)`.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    pub world: GaussianWorld,
    schedule: NoiseSchedule,
}

impl AnalyticDenoiser {
    pub fn new(world: GaussianWorld, schedule: NoiseSchedule) -> Self {
        AnalyticDenoiser { world, schedule }
    }
}

impl Denoiser for AnalyticDenoiser {
    fn num_timesteps(&self) -> usize {
        self.schedule.len()
    }

    fn predict_noise(&self, z_t: &Clip, t: usize, _cond: &Conditioning) -> Result<Clip> {
        self.schedule.check_timestep(t)?;
        let ab = self.schedule.alpha_bar()[t];
        let sb = self.schedule.sigma_bar()[t];
        let denom = ab * ab * self.world.s * self.world.s + sb * sb;
        let gain = sb / denom;
        let shift = ab * self.world.mu;
        let mut out = z_t.clone();
        for v in &mut out.data {
            *v = (gain * (*v as f64 - shift)) as f32;
        }
        Ok(out)
    }
}

/// Frozen stand-in for a text encoder: a fixed random embedding per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEncoder {
    pub vocab: Vec<String>,
    pub dim: usize,
    pub seed: u64,
}

impl LabelEncoder {
    pub fn new(vocab: Vec<String>, dim: usize, seed: u64) -> Self {
        LabelEncoder { vocab, dim, seed }
    }

    pub fn index(&self, label: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|v| v == label)
            .ok_or_else(|| Error::invalid(format!("unknown label {label:?}")))
    }

    pub fn encode(&self, label: &str) -> Result<Conditioning> {
        let idx = self.index(label)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(idx as u64 + 1);
        let emb = (0..self.dim)
            .map(|_| {
                let e: f32 = StandardNormal.sample(&mut rng);
                e
            })
            .collect();
        Ok(Conditioning::new(emb))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    TempConv,
    TempAttn,
}

/// Where a temporal layer sits: after the full-resolution residual block
/// (`level1`) or after the half-resolution one (`level2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPosition {
    Level1,
    Level2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalLayer {
    pub kind: TemporalKind,
    pub position: LayerPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    /// Maximum clip length; the positional table of Temp-Attn has this many rows.
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub hidden2: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub cond_dim: usize,
    pub temporal_layers: Vec<TemporalLayer>,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec {
            frames: 8,
            channels: 4,
            height: 8,
            width: 8,
            hidden: 8,
            hidden2: 16,
            time_dim: 16,
            emb_dim: 32,
            cond_dim: 16,
            temporal_layers: vec![
                TemporalLayer {
                    kind: TemporalKind::TempConv,
                    position: LayerPosition::Level1,
                },
                TemporalLayer {
                    kind: TemporalKind::TempAttn,
                    position: LayerPosition::Level2,
                },
            ],
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 || self.hidden == 0 || self.hidden2 == 0 {
            return Err(Error::invalid("denoiser dimensions must be positive"));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("latent height and width must be even and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum TemporalBlock {
    Conv { first: Conv, last: Conv },
    Attn {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        bo: ParamId,
        pos: ParamId,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    time1: Lin,
    time2: Lin,
    cond: Lin,
    emb1: Lin,
    emb2: Lin,
    conv_in: Conv,
    res1: (Conv, Conv),
    down: Conv,
    res2: (Conv, Conv),
    up: Conv,
    res3: (Conv, Conv),
    conv_out: Conv,
    temporal: Vec<(TemporalLayer, TemporalBlock)>,
}

/// Small U-shaped denoiser: frame-batched 2-D residual blocks over two
/// resolutions, with Temp-Conv / Temp-Attn layers injected behind
/// zero-initialised output projections and residual connections.
#[derive(Debug, Clone)]
pub struct TinyVideoDenoiser {
    pub spec: DenoiserSpec,
    pub params: ParamStore,
    num_timesteps: usize,
    layout: Layout,
}

fn add_conv<R: Rng>(
    ps: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    ci: usize,
    co: usize,
    k: usize,
    zero: bool,
    rng: &mut R,
) -> Conv {
    let w = if zero {
        ps.add_zeros(format!("{name}.w"), group, &[co, ci, k, k])
    } else {
        ps.add_uniform(format!("{name}.w"), group, &[co, ci, k, k], ci * k * k, 1.0, rng)
    };
    let b = ps.add_zeros(format!("{name}.b"), group, &[co]);
    Conv { w, b }
}

fn add_lin<R: Rng>(ps: &mut ParamStore, name: &str, group: ParamGroup, i: usize, o: usize, rng: &mut R) -> Lin {
    let w = ps.add_uniform(format!("{name}.w"), group, &[o, i], i, 1.0, rng);
    let b = ps.add_zeros(format!("{name}.b"), group, &[o]);
    Lin { w, b }
}

fn add_tconv<R: Rng>(ps: &mut ParamStore, name: &str, ch: usize, zero: bool, rng: &mut R) -> Conv {
    let w = if zero {
        ps.add_zeros(format!("{name}.w"), ParamGroup::Temporal, &[ch, ch, 3])
    } else {
        ps.add_uniform(format!("{name}.w"), ParamGroup::Temporal, &[ch, ch, 3], ch * 3, 1.0, rng)
    };
    let b = ps.add_zeros(format!("{name}.b"), ParamGroup::Temporal, &[ch]);
    Conv { w, b }
}

/// Sinusoidal timestep features, `[sin(t w_k), cos(t w_k)]`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[k] = a.sin() as f32;
        out[half + k] = a.cos() as f32;
    }
    out
}

impl TinyVideoDenoiser {
    pub fn new(spec: DenoiserSpec, num_timesteps: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (h, h2, e) = (spec.hidden, spec.hidden2, spec.emb_dim);
        let time1 = add_lin(&mut ps, "time.l1", ParamGroup::Embedding, spec.time_dim, e, &mut rng);
        let time2 = add_lin(&mut ps, "time.l2", ParamGroup::Embedding, e, e, &mut rng);
        let cond = add_lin(&mut ps, "cond.proj", ParamGroup::Embedding, spec.cond_dim, e, &mut rng);
        let emb1 = add_lin(&mut ps, "emb.level1", ParamGroup::Embedding, e, h, &mut rng);
        let emb2 = add_lin(&mut ps, "emb.level2", ParamGroup::Embedding, e, h2, &mut rng);
        let sp = ParamGroup::Spatial;
        let conv_in = add_conv(&mut ps, "conv_in", sp, spec.channels, h, 3, false, &mut rng);
        let res1 = (
            add_conv(&mut ps, "res1.c1", sp, h, h, 3, false, &mut rng),
            add_conv(&mut ps, "res1.c2", sp, h, h, 3, false, &mut rng),
        );
        let down = add_conv(&mut ps, "down", sp, h, h2, 3, false, &mut rng);
        let res2 = (
            add_conv(&mut ps, "res2.c1", sp, h2, h2, 3, false, &mut rng),
            add_conv(&mut ps, "res2.c2", sp, h2, h2, 3, false, &mut rng),
        );
        let up = add_conv(&mut ps, "up", sp, h2, h, 3, false, &mut rng);
        let res3 = (
            add_conv(&mut ps, "res3.c1", sp, h, h, 3, false, &mut rng),
            add_conv(&mut ps, "res3.c2", sp, h, h, 3, false, &mut rng),
        );
        let conv_out = add_conv(&mut ps, "conv_out", sp, h, spec.channels, 3, false, &mut rng);

        let mut temporal = Vec::new();
        for (i, layer) in spec.temporal_layers.iter().enumerate() {
            let ch = match layer.position {
                LayerPosition::Level1 => h,
                LayerPosition::Level2 => h2,
            };
            let block = match layer.kind {
                TemporalKind::TempConv => TemporalBlock::Conv {
                    first: add_tconv(&mut ps, &format!("temporal{i}.conv1"), ch, false, &mut rng),
                    last: add_tconv(&mut ps, &format!("temporal{i}.conv2"), ch, true, &mut rng),
                },
                TemporalKind::TempAttn => {
                    let tg = ParamGroup::Temporal;
                    let p = format!("temporal{i}.attn");
                    TemporalBlock::Attn {
                        wq: ps.add_uniform(format!("{p}.wq"), tg, &[ch, ch], ch, 1.0, &mut rng),
                        wk: ps.add_uniform(format!("{p}.wk"), tg, &[ch, ch], ch, 1.0, &mut rng),
                        wv: ps.add_uniform(format!("{p}.wv"), tg, &[ch, ch], ch, 1.0, &mut rng),
                        wo: ps.add_zeros(format!("{p}.wo"), tg, &[ch, ch]),
                        bo: ps.add_zeros(format!("{p}.bo"), tg, &[ch]),
                        pos: ps.add_uniform(format!("{p}.pos"), tg, &[spec.frames, ch], 3, 1.0, &mut rng),
                    }
                }
            };
            temporal.push((*layer, block));
        }
        let layout = Layout {
            time1,
            time2,
            cond,
            emb1,
            emb2,
            conv_in,
            res1,
            down,
            res2,
            up,
            res3,
            conv_out,
            temporal,
        };
        Ok(TinyVideoDenoiser {
            spec,
            params: ps,
            num_timesteps,
            layout,
        })
    }

    /// Rebuilds the model around stored parameters (checkpoint loading).
    pub fn from_params(spec: DenoiserSpec, num_timesteps: usize, params: ParamStore) -> Result<Self> {
        let mut model = TinyVideoDenoiser::new(spec, num_timesteps, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter tensors, spec implies {}",
                params.len(),
                model.params.len()
            )));
        }
        for ((_, a), (_, b)) in model.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape != b.value.shape || a.group != b.group {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} does not match spec",
                    b.name
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn conv(&self, g: &mut Graph, x: Var, c: Conv) -> Var {
        let w = g.param(&self.params, c.w);
        let b = g.param(&self.params, c.b);
        g.conv2d(x, w, b)
    }

    fn lin(&self, g: &mut Graph, x: Var, l: Lin) -> Var {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        g.linear(x, w, b)
    }

    fn res_block(&self, g: &mut Graph, x: Var, (c1, c2): (Conv, Conv)) -> Var {
        let h = g.silu(x);
        let h = self.conv(g, h, c1);
        let h = g.silu(h);
        let h = self.conv(g, h, c2);
        g.add(x, h)
    }

    fn temporal_blocks(&self, g: &mut Graph, mut x: Var, at: LayerPosition) -> Var {
        for (layer, block) in &self.layout.temporal {
            if layer.position != at {
                continue;
            }
            let delta = match *block {
                TemporalBlock::Conv { first, last } => {
                    let (w1, b1) = (g.param(&self.params, first.w), g.param(&self.params, first.b));
                    let (w2, b2) = (g.param(&self.params, last.w), g.param(&self.params, last.b));
                    let h = g.temporal_conv(x, w1, b1);
                    let h = g.silu(h);
                    g.temporal_conv(h, w2, b2)
                }
                TemporalBlock::Attn { wq, wk, wv, wo, bo, pos } => {
                    let p = &self.params;
                    let (wq, wk, wv) = (g.param(p, wq), g.param(p, wk), g.param(p, wv));
                    let (wo, bo, pos) = (g.param(p, wo), g.param(p, bo), g.param(p, pos));
                    g.temporal_attention(x, wq, wk, wv, wo, bo, pos)
                }
            };
            x = g.add(x, delta);
        }
        x
    }

    /// Forward pass on a batch `z [B, F, C, H, W]`. With `temporal = false`
    /// every temporal layer is skipped, leaving the purely spatial network.
    pub fn forward(
        &self,
        g: &mut Graph,
        z: Var,
        timesteps: &[usize],
        conds: &[Conditioning],
        temporal: bool,
    ) -> Var {
        let b = timesteps.len();
        let mut tf = Vec::with_capacity(b * self.spec.time_dim);
        let mut cf = Vec::with_capacity(b * self.spec.cond_dim);
        for (t, c) in timesteps.iter().zip(conds) {
            tf.extend(timestep_features(*t, self.spec.time_dim));
            if c.null_flag {
                cf.extend(std::iter::repeat_n(0.0, self.spec.cond_dim));
            } else {
                cf.extend_from_slice(&c.embedding);
            }
        }
        let tin = g.input(Tensor::new(&[b, self.spec.time_dim], tf));
        let cin = g.input(Tensor::new(&[b, self.spec.cond_dim], cf));
        let te = self.lin(g, tin, self.layout.time1);
        let te = g.silu(te);
        let te = self.lin(g, te, self.layout.time2);
        let ce = self.lin(g, cin, self.layout.cond);
        let emb = g.add(te, ce);
        let emb = g.silu(emb);
        let e1 = self.lin(g, emb, self.layout.emb1);
        let e2 = self.lin(g, emb, self.layout.emb2);

        let x = self.conv(g, z, self.layout.conv_in);
        let x = g.channel_bias(x, e1);
        let x = self.res_block(g, x, self.layout.res1);
        let x = if temporal {
            self.temporal_blocks(g, x, LayerPosition::Level1)
        } else {
            x
        };
        let skip = x;
        let x = g.avg_pool2(x);
        let x = self.conv(g, x, self.layout.down);
        let x = g.channel_bias(x, e2);
        let x = self.res_block(g, x, self.layout.res2);
        let x = if temporal {
            self.temporal_blocks(g, x, LayerPosition::Level2)
        } else {
            x
        };
        let x = g.upsample2(x);
        let x = self.conv(g, x, self.layout.up);
        let x = g.add(x, skip);
        let x = self.res_block(g, x, self.layout.res3);
        let x = g.silu(x);
        self.conv(g, x, self.layout.conv_out)
    }

    fn check_input(&self, z: &Clip) -> Result<()> {
        let s = &self.spec;
        if z.channels != s.channels || z.height != s.height || z.width != s.width || z.frames > s.frames || z.frames == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![s.frames, s.channels, s.height, s.width],
                got: z.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_cond(&self, cond: &Conditioning) -> Result<()> {
        if !cond.null_flag && cond.embedding.len() != self.spec.cond_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.spec.cond_dim],
                got: vec![cond.embedding.len()],
            });
        }
        Ok(())
    }

    fn run(&self, z_t: &Clip, t: usize, cond: &Conditioning, temporal: bool) -> Result<Clip> {
        self.check_input(z_t)?;
        self.check_cond(cond)?;
        if t >= self.num_timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                len: self.num_timesteps,
            });
        }
        let mut g = Graph::new();
        let shape = [1, z_t.frames, z_t.channels, z_t.height, z_t.width];
        let z = g.input(Tensor::new(&shape, z_t.data.clone()));
        let y = self.forward(&mut g, z, &[t], std::slice::from_ref(cond), temporal);
        let data = g.value(y).data.clone();
        Clip::from_vec(z_t.frames, z_t.channels, z_t.height, z_t.width, data)
    }

    /// The model with every temporal layer bypassed.
    pub fn predict_noise_spatial(&self, z_t: &Clip, t: usize, cond: &Conditioning) -> Result<Clip> {
        self.run(z_t, t, cond, false)
    }
}

impl Denoiser for TinyVideoDenoiser {
    fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    fn predict_noise(&self, z_t: &Clip, t: usize, cond: &Conditioning) -> Result<Clip> {
        self.run(z_t, t, cond, true)
    }
}

/// Clips with one conditioning each, all of one shape.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub clips: Vec<Clip>,
    pub conds: Vec<Conditioning>,
}

impl TrainingSet {
    pub fn new(clips: Vec<Clip>, conds: Vec<Conditioning>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if clips.len() != conds.len() {
            return Err(Error::Data(format!(
                "{} clips but {} conditionings",
                clips.len(),
                conds.len()
            )));
        }
        for c in &clips[1..] {
            clips[0].check_shape(c)?;
        }
        Ok(TrainingSet { clips, conds })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.clips[0].shape()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing the condition by the null condition.
    pub p_uncond: f64,
    pub adam: AdamConfig,
    pub trainable: Vec<ParamGroup>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 4,
            p_uncond: 0.1,
            adam: AdamConfig::default(),
            trainable: vec![ParamGroup::Spatial, ParamGroup::Embedding, ParamGroup::Temporal],
            seed: 0,
        }
    }
}

/// Random draws for one training item: timestep, target noise, and
/// whether the condition is dropped.
#[derive(Debug, Clone)]
pub struct TrainingDraw {
    pub t: usize,
    pub noise: Clip,
    pub drop_cond: bool,
}

pub fn draw_training_item<R: Rng>(shape: [usize; 4], num_timesteps: usize, p_uncond: f64, rng: &mut R) -> TrainingDraw {
    let t = rng.random_range(0..num_timesteps);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f32 = StandardNormal.sample(rng);
            e
        })
        .collect();
    let drop_cond = rng.random::<f64>() < p_uncond;
    TrainingDraw {
        t,
        noise: Clip::from_vec(shape[0], shape[1], shape[2], shape[3], data).expect("sized"),
        drop_cond,
    }
}

/// Denoising objective `mean ||y - f(z_t; c, t)||^2` over a batch, using
/// any [`Denoiser`]. Returns the mean over all elements.
pub fn training_loss<R: Rng>(
    model: &dyn Denoiser,
    batch: &[Clip],
    conds: &[Conditioning],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if batch.len() != conds.len() {
        return Err(Error::invalid("batch and conditioning lengths differ"));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (x0, c) in batch.iter().zip(conds) {
        let draw = draw_training_item(x0.shape(), schedule.len(), p_uncond, rng);
        let z = schedule.q_sample(x0, draw.t, &draw.noise)?;
        let cond = if draw.drop_cond { c.as_null() } else { c.clone() };
        let pred = model.predict_noise(&z, draw.t, &cond)?;
        pred.check_shape(&draw.noise)?;
        total += pred
            .data
            .iter()
            .zip(&draw.noise.data)
            .map(|(p, y)| ((p - y) as f64).powi(2))
            .sum::<f64>();
        count += pred.data.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f32>,
}

impl TrainReport {
    /// Mean of the first and last `window` losses.
    pub fn head_tail(&self, window: usize) -> Option<(f32, f32)> {
        if self.losses.is_empty() {
            return None;
        }
        let w = window.clamp(1, self.losses.len());
        let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
        Some((mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..])))
    }
}

/// Trains `model` in place on `data` and returns the per-step loss curve.
pub fn train(
    model: &mut TinyVideoDenoiser,
    data: &TrainingSet,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f32),
) -> Result<TrainReport> {
    if schedule.len() != model.num_timesteps {
        return Err(Error::invalid("schedule length differs from the model's"));
    }
    let shape = data.shape();
    model.check_input(&data.clips[0])?;
    for c in &data.conds {
        model.check_cond(c)?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.adam, &cfg.trainable);
    let mut report = TrainReport::default();
    let [f, c, h, w] = shape;
    for step in 0..cfg.steps {
        let mut zdata = Vec::with_capacity(cfg.batch_size * f * c * h * w);
        let mut ndata = Vec::with_capacity(zdata.capacity());
        let mut ts = Vec::with_capacity(cfg.batch_size);
        let mut conds = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.random_range(0..data.clips.len());
            let draw = draw_training_item(shape, schedule.len(), cfg.p_uncond, &mut rng);
            let z = schedule.q_sample(&data.clips[idx], draw.t, &draw.noise)?;
            zdata.extend_from_slice(&z.data);
            ndata.extend_from_slice(&draw.noise.data);
            ts.push(draw.t);
            conds.push(if draw.drop_cond {
                data.conds[idx].as_null()
            } else {
                data.conds[idx].clone()
            });
        }
        let bshape = [cfg.batch_size, f, c, h, w];
        let mut g = Graph::new();
        let z = g.input(Tensor::new(&bshape, zdata));
        let y = g.input(Tensor::new(&bshape, ndata));
        let pred = model.forward(&mut g, z, &ts, &conds, true);
        let loss = g.mse(pred, y);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("training loss {lv} at step {step}")));
        }
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        opt.step(&mut model.params, &pg);
        report.losses.push(lv);
        on_step(step, lv);
    }
    Ok(report)
}
