//! Tiny pixel/latent autoencoder with temporal layers injected into the
//! decoder, plus the three-term decoder fine-tuning (reconstruction,
//! latent regularisation, patch adversarial).
//!
//! The encoder works frame by frame. The decoder mirrors it, and each
//! injected Temp-Conv block (`conv -> silu -> conv` along frames) is added
//! residually with its last convolution zero-initialised, so injection
//! leaves the decoder's output unchanged bit for bit.
//!
//! Temporal convolutions zero-pad beyond the first and last frame. A
//! single-frame clip therefore only sees the centre tap of each temporal
//! kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clip::{Clip, LatentClip, PixelClip};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Temp-Conv block in the decoder at resolution `level`: 0 is the latent
/// resolution, each further level is one 2x upsampling later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderTemporalLayer {
    pub level: usize,
    /// Zero-initialise the block's last convolution.
    pub zero_init: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub image_channels: usize,
    /// Power of two.
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    #[serde(default)]
    pub decoder_temporal_layers: Vec<DecoderTemporalLayer>,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        AutoencoderSpec {
            image_channels: 3,
            downsample_factor: 4,
            latent_channels: 4,
            hidden: 8,
            decoder_temporal_layers: Vec::new(),
        }
    }
}

impl AutoencoderSpec {
    pub fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Temp-Conv blocks at the latent resolution and one level above.
    pub fn default_temporal_layers() -> Vec<DecoderTemporalLayer> {
        vec![
            DecoderTemporalLayer { level: 0, zero_init: true },
            DecoderTemporalLayer { level: 1, zero_init: true },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor must be a power of two, got {}",
                self.downsample_factor
            )));
        }
        if self.image_channels == 0 || self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if let Some(l) = self.decoder_temporal_layers.iter().find(|l| l.level > self.levels()) {
            return Err(Error::Config(format!(
                "temporal layer at level {} but the decoder has levels 0..={}",
                l.level,
                self.levels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

fn add_conv<R: Rng>(ps: &mut ParamStore, name: &str, group: ParamGroup, ci: usize, co: usize, rng: &mut R) -> Conv {
    Conv {
        w: ps.add_uniform(format!("{name}.w"), group, &[co, ci, 3, 3], ci * 9, 1.0, rng),
        b: ps.add_zeros(format!("{name}.b"), group, &[co]),
    }
}

fn add_tconv<R: Rng>(ps: &mut ParamStore, name: &str, ch: usize, zero: bool, rng: &mut R) -> Conv {
    let w = if zero {
        ps.add_zeros(format!("{name}.w"), ParamGroup::Temporal, &[ch, ch, 3])
    } else {
        ps.add_uniform(format!("{name}.w"), ParamGroup::Temporal, &[ch, ch, 3], ch * 3, 1.0, rng)
    };
    Conv {
        w,
        b: ps.add_zeros(format!("{name}.b"), ParamGroup::Temporal, &[ch]),
    }
}

fn conv(g: &mut Graph, ps: &ParamStore, x: Var, c: Conv) -> Var {
    let w = g.param(ps, c.w);
    let b = g.param(ps, c.b);
    g.conv2d(x, w, b)
}

#[derive(Debug, Clone)]
struct Layout {
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_out: Conv,
    dec_in: Conv,
    dec_up: Vec<Conv>,
    dec_out: Conv,
    temporal: Vec<(DecoderTemporalLayer, Conv, Conv)>,
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub spec: AutoencoderSpec,
    pub params: ParamStore,
    layout: Layout,
}

impl Autoencoder {
    pub fn new(spec: AutoencoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (h, e, s) = (spec.hidden, ParamGroup::Encoder, ParamGroup::Spatial);
        let enc_in = add_conv(&mut ps, "enc.in", e, spec.image_channels, h, &mut rng);
        let enc_down = (0..spec.levels())
            .map(|l| add_conv(&mut ps, &format!("enc.down{l}"), e, h, h, &mut rng))
            .collect();
        let enc_out = add_conv(&mut ps, "enc.out", e, h, spec.latent_channels, &mut rng);
        let dec_in = add_conv(&mut ps, "dec.in", s, spec.latent_channels, h, &mut rng);
        let dec_up = (0..spec.levels())
            .map(|l| add_conv(&mut ps, &format!("dec.up{l}"), s, h, h, &mut rng))
            .collect();
        let dec_out = add_conv(&mut ps, "dec.out", s, h, spec.image_channels, &mut rng);
        let mut ae = Autoencoder {
            spec: AutoencoderSpec {
                decoder_temporal_layers: Vec::new(),
                ..spec.clone()
            },
            params: ps,
            layout: Layout {
                enc_in,
                enc_down,
                enc_out,
                dec_in,
                dec_up,
                dec_out,
                temporal: Vec::new(),
            },
        };
        ae.inject_temporal(&spec.decoder_temporal_layers, seed.wrapping_add(1))?;
        Ok(ae)
    }

    /// Adds Temp-Conv blocks to the decoder. Existing parameters are kept.
    pub fn inject_temporal(&mut self, layers: &[DecoderTemporalLayer], seed: u64) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.decoder_temporal_layers.extend_from_slice(layers);
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.spec.hidden;
        for layer in layers {
            let i = self.layout.temporal.len();
            let first = add_tconv(&mut self.params, &format!("dec.temporal{i}.conv1"), h, false, &mut rng);
            let last = add_tconv(&mut self.params, &format!("dec.temporal{i}.conv2"), h, layer.zero_init, &mut rng);
            self.layout.temporal.push((*layer, first, last));
        }
        self.spec = spec;
        Ok(())
    }

    /// Rebuilds around stored parameters.
    pub fn from_params(spec: AutoencoderSpec, params: ParamStore) -> Result<Self> {
        let mut ae = Autoencoder::new(spec, 0)?;
        if ae.params.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter tensors, spec implies {}",
                params.len(),
                ae.params.len()
            )));
        }
        for ((_, a), (_, b)) in ae.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape != b.value.shape || a.group != b.group {
                return Err(Error::Format(format!("checkpoint parameter {} does not match spec", b.name)));
            }
        }
        ae.params = params;
        Ok(ae)
    }

    /// `x [B, F, C, H, W]` to latents of the same leading shape.
    pub fn encode_graph(&self, g: &mut Graph, x: Var) -> Var {
        let ps = &self.params;
        let mut h = conv(g, ps, x, self.layout.enc_in);
        h = g.silu(h);
        for &c in &self.layout.enc_down {
            h = g.avg_pool2(h);
            h = conv(g, ps, h, c);
            h = g.silu(h);
        }
        conv(g, ps, h, self.layout.enc_out)
    }

    fn temporal_at(&self, g: &mut Graph, mut x: Var, level: usize) -> Var {
        for (layer, first, last) in &self.layout.temporal {
            if layer.level != level {
                continue;
            }
            let ps = &self.params;
            let (w1, b1) = (g.param(ps, first.w), g.param(ps, first.b));
            let (w2, b2) = (g.param(ps, last.w), g.param(ps, last.b));
            let d = g.temporal_conv(x, w1, b1);
            let d = g.silu(d);
            let d = g.temporal_conv(d, w2, b2);
            x = g.add(x, d);
        }
        x
    }

    /// `z [B, F, C, H, W]` to pixels; `temporal = false` bypasses every
    /// Temp-Conv block, which is the per-frame decoder.
    pub fn decode_graph(&self, g: &mut Graph, z: Var, temporal: bool) -> Var {
        let ps = &self.params;
        let mut h = conv(g, ps, z, self.layout.dec_in);
        h = g.silu(h);
        if temporal {
            h = self.temporal_at(g, h, 0);
        }
        for (l, &c) in self.layout.dec_up.iter().enumerate() {
            h = g.upsample2(h);
            h = conv(g, ps, h, c);
            h = g.silu(h);
            if temporal {
                h = self.temporal_at(g, h, l + 1);
            }
        }
        conv(g, ps, h, self.layout.dec_out)
    }

    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> [usize; 4] {
        let d = self.spec.downsample_factor;
        [frames, self.spec.latent_channels, height / d, width / d]
    }

    pub fn encode(&self, video: &PixelClip) -> Result<LatentClip> {
        let d = self.spec.downsample_factor;
        if video.channels != self.spec.image_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.spec.image_channels],
                got: vec![video.channels],
            });
        }
        if video.height % d != 0 || video.width % d != 0 || video.height == 0 || video.width == 0 {
            return Err(Error::invalid(format!(
                "{}x{} frames are not divisible by the downsample factor {d}",
                video.height, video.width
            )));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, video.frames, video.channels, video.height, video.width], video.data.clone()));
        let z = self.encode_graph(&mut g, x);
        let [f, c, h, w] = self.latent_shape(video.frames, video.height, video.width);
        Clip::from_vec(f, c, h, w, g.value(z).data.clone())
    }

    fn run_decoder(&self, latents: &LatentClip, temporal: bool) -> Result<PixelClip> {
        if latents.channels != self.spec.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.spec.latent_channels],
                got: vec![latents.channels],
            });
        }
        let z = latents;
        let mut g = Graph::new();
        let zin = g.input(Tensor::new(&[1, z.frames, z.channels, z.height, z.width], z.data.clone()));
        let x = self.decode_graph(&mut g, zin, temporal);
        let d = self.spec.downsample_factor;
        Clip::from_vec(
            z.frames,
            self.spec.image_channels,
            z.height * d,
            z.width * d,
            g.value(x).data.clone(),
        )
    }

    /// Decodes the whole clip; temporal layers mix across frames.
    pub fn decode(&self, latents: &LatentClip) -> Result<PixelClip> {
        self.run_decoder(latents, true)
    }

    /// Decodes with every temporal layer bypassed.
    pub fn decode_per_frame(&self, latents: &LatentClip) -> Result<PixelClip> {
        self.run_decoder(latents, false)
    }

    pub fn has_temporal_layers(&self) -> bool {
        !self.layout.temporal.is_empty()
    }
}

/// Loss weights for decoder fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLossWeights {
    pub a_rec: f64,
    pub a_reg: f64,
    pub a_disc: f64,
}

impl Default for FinetuneLossWeights {
    fn default() -> Self {
        FinetuneLossWeights {
            a_rec: 1.0,
            a_reg: 1e-5,
            a_disc: 0.5,
        }
    }
}

impl FinetuneLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("a_rec", self.a_rec), ("a_reg", self.a_reg), ("a_disc", self.a_disc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Three-layer per-frame patch discriminator; one logit per 4x4 patch
/// neighbourhood at a quarter of the input resolution.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub params: ParamStore,
    convs: [Conv; 3],
}

impl PatchDiscriminator {
    pub fn new(image_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = ParamGroup::Discriminator;
        let convs = [
            add_conv(&mut ps, "disc.c1", d, image_channels, hidden, &mut rng),
            add_conv(&mut ps, "disc.c2", d, hidden, hidden * 2, &mut rng),
            add_conv(&mut ps, "disc.c3", d, hidden * 2, 1, &mut rng),
        ];
        PatchDiscriminator { params: ps, convs }
    }

    /// Patch logits. With `trainable = false` the weights enter the graph as
    /// constants, so gradients only reach the input.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Var {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            let (w, b) = if trainable {
                (g.param(&self.params, c.w), g.param(&self.params, c.b))
            } else {
                (
                    g.input(self.params.value(c.w).clone()),
                    g.input(self.params.value(c.b).clone()),
                )
            };
            h = g.conv2d(h, w, b);
            if i < 2 {
                h = g.leaky_relu(h, 0.2);
                h = g.avg_pool2(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub reg_weight: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 400,
            batch_size: 4,
            reg_weight: 1e-5,
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub weights: FinetuneLossWeights,
    /// Std of per-frame Gaussian noise added to the encoder's latents, so
    /// the decoder sees the frame-to-frame wobble of sampled latents.
    pub latent_jitter: f64,
    /// Discriminator updates per decoder update.
    pub disc_steps: usize,
    pub adam: AdamConfig,
    pub disc_adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 300,
            batch_size: 4,
            weights: FinetuneLossWeights::default(),
            latent_jitter: 0.3,
            disc_steps: 1,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            disc_adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneStep {
    pub total: f32,
    pub rec: f32,
    pub reg: f32,
    /// Adversarial term of the decoder objective.
    pub adv: f32,
    /// Discriminator loss (0 when the adversarial weight is 0).
    pub disc: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub steps: Vec<FinetuneStep>,
}

fn check_video_set(ae: &Autoencoder, clips: &[PixelClip]) -> Result<[usize; 4]> {
    let first = clips.first().ok_or_else(|| Error::Data("no training clips".into()))?;
    if let Some(c) = clips.iter().find(|c| !c.same_shape(first)) {
        return Err(Error::Data(format!(
            "training clips differ in shape: {:?} vs {:?}",
            first.shape(),
            c.shape()
        )));
    }
    let d = ae.spec.downsample_factor;
    if first.channels != ae.spec.image_channels || first.height % d != 0 || first.width % d != 0 {
        return Err(Error::Data(format!("clip shape {:?} does not fit the autoencoder", first.shape())));
    }
    Ok(first.shape())
}

fn draw_batch(clips: &[PixelClip], batch: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut data = Vec::with_capacity(batch * clips[0].data.len());
    for _ in 0..batch {
        data.extend_from_slice(&clips[rng.random_range(0..clips.len())].data);
    }
    data
}

/// Trains encoder and per-frame decoder on reconstruction plus a small
/// latent-magnitude penalty. Temporal layers are bypassed and untouched.
pub fn pretrain(ae: &mut Autoencoder, clips: &[PixelClip], cfg: &PretrainConfig) -> Result<Vec<f32>> {
    let [f, c, h, w] = check_video_set(ae, clips)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&ae.params, cfg.adam, &[ParamGroup::Encoder, ParamGroup::Spatial]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[cfg.batch_size, f, c, h, w], draw_batch(clips, cfg.batch_size, &mut rng)));
        let z = ae.encode_graph(&mut g, x);
        let y = ae.decode_graph(&mut g, z, false);
        let rec = g.mse(y, x);
        let reg = g.mean_square(z);
        let loss = g.weighted_sum(&[(rec, 1.0), (reg, cfg.reg_weight as f32)]);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("autoencoder loss {lv} at step {step}")));
        }
        let grads = g.backward(loss);
        opt.step(&mut ae.params, &g.param_grads(&grads));
        losses.push(lv);
    }
    Ok(losses)
}

/// Digests of the parameter groups fine-tuning must not touch.
pub fn frozen_digests(ae: &Autoencoder) -> (String, String) {
    (
        ae.params.group_digest(ParamGroup::Encoder),
        ae.params.group_digest(ParamGroup::Spatial),
    )
}

/// Fine-tunes only the decoder's temporal layers on
/// `a_rec * mse + a_reg * mean(z^2) + a_disc * softplus(-D(x_hat))`, with one
/// (or `disc_steps`) discriminator update per decoder update.
///
/// Latents come from the frozen encoder, so the regularisation term is a
/// constant here; it is still reported and included in the total.
pub fn finetune_decoder(
    ae: &mut Autoencoder,
    disc: &mut PatchDiscriminator,
    clips: &[PixelClip],
    cfg: &FinetuneConfig,
    mut on_step: impl FnMut(usize, &FinetuneStep),
) -> Result<FinetuneReport> {
    cfg.weights.validate()?;
    let [f, c, h, w] = check_video_set(ae, clips)?;
    if !ae.has_temporal_layers() {
        return Err(Error::Config("decoder has no temporal layers to fine-tune".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(cfg.latent_jitter >= 0.0 && cfg.latent_jitter.is_finite()) {
        return Err(Error::Config(format!("latent jitter must be finite and >= 0, got {}", cfg.latent_jitter)));
    }
    let before = frozen_digests(ae);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&ae.params, cfg.adam, &[ParamGroup::Temporal]);
    let mut dopt = Adam::new(&disc.params, cfg.disc_adam, &[ParamGroup::Discriminator]);
    let wts = cfg.weights;
    let use_disc = wts.a_disc > 0.0;
    let bshape = [cfg.batch_size, f, c, h, w];
    let mut report = FinetuneReport::default();
    for step in 0..cfg.steps {
        let xdata = draw_batch(clips, cfg.batch_size, &mut rng);

        let mut eg = Graph::new();
        let xin = eg.input(Tensor::new(&bshape, xdata.clone()));
        let zv = ae.encode_graph(&mut eg, xin);
        let zt = eg.value(zv).clone();
        let mut zj = zt.clone();
        if cfg.latent_jitter > 0.0 {
            for v in &mut zj.data {
                let e: f64 = rng.sample(StandardNormal);
                *v += (cfg.latent_jitter * e) as f32;
            }
        }

        let mut g = Graph::new();
        let x = g.input(Tensor::new(&bshape, xdata.clone()));
        let z = g.input(zj);
        let zc = g.input(zt);
        let y = ae.decode_graph(&mut g, z, true);
        let rec = g.mse(y, x);
        let reg = g.mean_square(zc);
        let mut terms = vec![(rec, wts.a_rec as f32), (reg, wts.a_reg as f32)];
        let adv = if use_disc {
            let logits = disc.forward(&mut g, y, false);
            let a = g.softplus_mean(logits, -1.0);
            terms.push((a, wts.a_disc as f32));
            Some(a)
        } else {
            None
        };
        let loss = g.weighted_sum(&terms);
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss {lv} at step {step}")));
        }
        let grads = g.backward(loss);
        opt.step(&mut ae.params, &g.param_grads(&grads));
        let fake = g.value(y).clone();

        let mut dl = 0.0;
        if use_disc {
            for _ in 0..cfg.disc_steps {
                let mut dg = Graph::new();
                let real = dg.input(Tensor::new(&bshape, xdata.clone()));
                let fk = dg.input(fake.clone());
                let lr = disc.forward(&mut dg, real, true);
                let lf = disc.forward(&mut dg, fk, true);
                let a = dg.softplus_mean(lr, -1.0);
                let b = dg.softplus_mean(lf, 1.0);
                let dloss = dg.add(a, b);
                dl = dg.value(dloss).item();
                if !dl.is_finite() {
                    return Err(Error::NonFinite(format!("discriminator loss {dl} at step {step}")));
                }
                let dgrads = dg.backward(dloss);
                dopt.step(&mut disc.params, &dg.param_grads(&dgrads));
            }
        }
        let rec_v = g.value(rec).item();
        let rec_reg = g.value(reg).item();
        let s = FinetuneStep {
            total: lv,
            rec: rec_v,
            reg: rec_reg,
            adv: adv.map(|a| g.value(a).item()).unwrap_or(0.0),
            disc: dl,
        };
        on_step(step, &s);
        report.steps.push(s);
    }
    if frozen_digests(ae) != before {
        return Err(Error::DigestMismatch("frozen autoencoder parameters changed during fine-tuning".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{gen_moving_shapes, MovingShapesSpec};

    fn spec_16() -> MovingShapesSpec {
        MovingShapesSpec {
            height: 16,
            width: 16,
            size_range: (2.5, 4.5),
            ..MovingShapesSpec::default()
        }
    }

    fn clips(spec: &MovingShapesSpec, seeds: std::ops::Range<u64>) -> Vec<Clip> {
        seeds.map(|s| gen_moving_shapes(spec, s).unwrap().0).collect()
    }

    #[test]
    fn encoder_is_per_frame() {
        let ae = Autoencoder::new(AutoencoderSpec::default(), 1).unwrap();
        let (clip, _) = gen_moving_shapes(&spec_16(), 3).unwrap();
        let z = ae.encode(&clip).unwrap();
        assert_eq!(z.shape(), [8, 4, 4, 4]);
        for k in 0..clip.frames {
            assert_eq!(ae.encode(&clip.frame_clip(k)).unwrap().data, z.frame(k));
        }
        let same = Clip::concat(&vec![clip.frame_clip(2); 3]).unwrap();
        let zs = ae.encode(&same).unwrap();
        assert_eq!(zs.frame(0), zs.frame(2));
        assert!(ae.encode(&Clip::zeros(1, 3, 10, 12)).is_err());
        assert!(ae.encode(&Clip::zeros(1, 2, 16, 16)).is_err());
    }

    #[test]
    fn injection_is_transparent() {
        let mut ae = Autoencoder::new(AutoencoderSpec::default(), 4).unwrap();
        let (clip, _) = gen_moving_shapes(&spec_16(), 9).unwrap();
        let z = ae.encode(&clip).unwrap();
        let before = ae.decode(&z).unwrap();
        ae.inject_temporal(&AutoencoderSpec::default_temporal_layers(), 7).unwrap();
        assert!(ae.has_temporal_layers());
        assert_eq!(ae.decode(&z).unwrap(), before);
        assert_eq!(ae.decode_per_frame(&z).unwrap(), before);
        assert!(ae.decode(&Clip::zeros(2, 3, 4, 4)).is_err());
    }

    #[test]
    fn single_frame_sees_centre_taps_only() {
        let spec = AutoencoderSpec {
            decoder_temporal_layers: vec![
                DecoderTemporalLayer { level: 0, zero_init: false },
                DecoderTemporalLayer { level: 2, zero_init: false },
            ],
            ..AutoencoderSpec::default()
        };
        let ae = Autoencoder::new(spec, 2).unwrap();
        let mut centre = ae.clone();
        let ids: Vec<_> = centre
            .params
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Temporal && p.name.ends_with(".w"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            for (i, v) in centre.params.value_mut(id).data.iter_mut().enumerate() {
                if i % 3 != 1 {
                    *v = 0.0;
                }
            }
        }
        let (clip, _) = gen_moving_shapes(&spec_16(), 5).unwrap();
        let z = ae.encode(&clip).unwrap();
        let single = ae.decode(&z.frame_clip(3)).unwrap();
        // with only centre taps the temporal layers act frame by frame
        let all = centre.decode(&z).unwrap();
        assert_eq!(single.data, all.frame(3));
        assert_ne!(single, ae.decode_per_frame(&z.frame_clip(3)).unwrap());
    }

    #[test]
    fn spec_validation() {
        let bad = [
            AutoencoderSpec { downsample_factor: 3, ..AutoencoderSpec::default() },
            AutoencoderSpec { hidden: 0, ..AutoencoderSpec::default() },
            AutoencoderSpec {
                decoder_temporal_layers: vec![DecoderTemporalLayer { level: 3, zero_init: true }],
                ..AutoencoderSpec::default()
            },
        ];
        for s in bad {
            assert!(matches!(Autoencoder::new(s, 0), Err(Error::Config(_))));
        }
        let w = FinetuneLossWeights { a_reg: -1.0, ..FinetuneLossWeights::default() };
        assert!(w.validate().is_err());
        assert_eq!(FinetuneLossWeights::default(), FinetuneLossWeights { a_rec: 1.0, a_reg: 1e-5, a_disc: 0.5 });
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let data = clips(&spec_16(), 0..16);
        let mut ae = Autoencoder::new(AutoencoderSpec::default(), 0).unwrap();
        let cfg = PretrainConfig { steps: 150, ..PretrainConfig::default() };
        let losses = pretrain(&mut ae, &data, &cfg).unwrap();
        let head: f32 = losses[..10].iter().sum::<f32>() / 10.0;
        let tail: f32 = losses[losses.len() - 10..].iter().sum::<f32>() / 10.0;
        assert!(tail < 0.5 * head, "head {head} tail {tail}");
        assert!(pretrain(&mut ae, &[], &cfg).is_err());
    }

    #[test]
    fn finetuning_touches_only_temporal_layers() {
        let data = clips(&spec_16(), 0..8);
        let mut ae = Autoencoder::new(AutoencoderSpec::default(), 0).unwrap();
        pretrain(&mut ae, &data, &PretrainConfig { steps: 20, ..PretrainConfig::default() }).unwrap();
        let mut disc = PatchDiscriminator::new(3, 8, 1);
        assert!(finetune_decoder(&mut ae, &mut disc, &data, &FinetuneConfig::default(), |_, _| {}).is_err());
        ae.inject_temporal(&AutoencoderSpec::default_temporal_layers(), 3).unwrap();
        let frozen = frozen_digests(&ae);
        let temporal = ae.params.group_digest(ParamGroup::Temporal);
        let dig = disc.params.digest();
        let cfg = FinetuneConfig { steps: 5, ..FinetuneConfig::default() };
        let r = finetune_decoder(&mut ae, &mut disc, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(r.steps.len(), 5);
        assert_eq!(frozen_digests(&ae), frozen);
        assert_ne!(ae.params.group_digest(ParamGroup::Temporal), temporal);
        assert_ne!(disc.params.digest(), dig);
        let (clip, _) = gen_moving_shapes(&spec_16(), 30).unwrap();
        let z = ae.encode(&clip).unwrap();
        assert_ne!(ae.decode(&z).unwrap(), ae.decode_per_frame(&z).unwrap());
    }

    #[test]
    fn pure_reconstruction_objective() {
        let data = clips(&spec_16(), 0..4);
        let mut ae = Autoencoder::new(AutoencoderSpec::default(), 0).unwrap();
        ae.inject_temporal(&AutoencoderSpec::default_temporal_layers(), 3).unwrap();
        let mut disc = PatchDiscriminator::new(3, 8, 1);
        let dig = disc.params.digest();
        let cfg = FinetuneConfig {
            steps: 3,
            weights: FinetuneLossWeights { a_rec: 1.0, a_reg: 0.0, a_disc: 0.0 },
            ..FinetuneConfig::default()
        };
        let r = finetune_decoder(&mut ae, &mut disc, &data, &cfg, |_, _| {}).unwrap();
        for s in &r.steps {
            assert_eq!(s.total, s.rec);
            assert_eq!(s.adv, 0.0);
        }
        assert_eq!(disc.params.digest(), dig);
    }

    #[test]
    fn rebuild_from_params() {
        let mut ae = Autoencoder::new(AutoencoderSpec::default(), 5).unwrap();
        ae.inject_temporal(&AutoencoderSpec::default_temporal_layers(), 1).unwrap();
        let back = Autoencoder::from_params(ae.spec.clone(), ae.params.clone()).unwrap();
        assert_eq!(back.params.digest(), ae.params.digest());
        assert!(Autoencoder::from_params(AutoencoderSpec::default(), ae.params.clone()).is_err());
    }
}
