//! Synthetic clips and the dataset-composition procedures: moving shapes,
//! zoom/pan pseudo-videos from still images, and segment-then-caption for
//! long videos behind pluggable scorer/captioner clients.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{Clip, PixelClip};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    fn unit(self) -> (f64, f64) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

impl ShapeKind {
    fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
        }
    }
}

/// One shape bouncing around a canvas. The label names the shape and its
/// main direction of travel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingShapesSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shapes: Vec<ShapeKind>,
    /// Shape radius (half side for squares), in pixels.
    pub size_range: (f64, f64),
    /// Speed along the main direction, pixels per frame.
    pub speed_range: (f64, f64),
    /// Largest perpendicular drift, pixels per frame.
    pub max_drift: f64,
    pub palette: Vec<[f32; 3]>,
    pub background: [f32; 3],
}

impl Default for MovingShapesSpec {
    fn default() -> Self {
        MovingShapesSpec {
            height: 32,
            width: 32,
            frames: 8,
            shapes: vec![ShapeKind::Disc, ShapeKind::Square],
            size_range: (4.0, 7.0),
            speed_range: (1.0, 2.5),
            max_drift: 0.5,
            palette: vec![
                [0.9, 0.2, 0.2],
                [0.2, 0.8, 0.3],
                [0.25, 0.35, 0.95],
                [0.95, 0.85, 0.2],
                [0.8, 0.3, 0.85],
                [0.2, 0.85, 0.85],
            ],
            background: [0.05, 0.05, 0.08],
        }
    }
}

/// Motion of one generated clip, enough to re-render it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMotion {
    pub kind: ShapeKind,
    pub direction: Direction,
    pub radius: f64,
    pub color: [f32; 3],
    /// Centre at frame 0, `(x, y)`.
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
        return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
    }
    Ok(())
}

impl MovingShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::Config("canvas and frame count must be positive".into()));
        }
        if self.shapes.is_empty() || self.palette.is_empty() {
            return Err(Error::Config("need at least one shape kind and one colour".into()));
        }
        check_range("size", self.size_range)?;
        check_range("speed", self.speed_range)?;
        if !(self.max_drift >= 0.0 && self.max_drift.is_finite()) {
            return Err(Error::Config(format!("drift must be finite and >= 0, got {}", self.max_drift)));
        }
        let limit = self.height.min(self.width) as f64 / 2.0;
        if self.size_range.1 >= limit {
            return Err(Error::Config(format!(
                "shape radius {} does not fit a {}x{} canvas",
                self.size_range.1, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Every label the generator can emit, in a fixed order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut kinds = self.shapes.clone();
        kinds.sort();
        kinds.dedup();
        kinds
            .iter()
            .flat_map(|k| Direction::ALL.iter().map(move |d| shape_label(*k, *d)))
            .collect()
    }

    /// Draws the motion parameters for `seed`.
    pub fn draw_motion(&self, seed: u64) -> Result<ShapeMotion> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = self.shapes[rng.random_range(0..self.shapes.len())];
        let direction = Direction::ALL[rng.random_range(0..4)];
        let radius = uniform(&mut rng, self.size_range);
        let color = self.palette[rng.random_range(0..self.palette.len())];
        let x = uniform(&mut rng, (radius, self.width as f64 - radius));
        let y = uniform(&mut rng, (radius, self.height as f64 - radius));
        let speed = uniform(&mut rng, self.speed_range);
        let drift = uniform(&mut rng, (-self.max_drift, self.max_drift));
        let (ux, uy) = direction.unit();
        let velocity = (ux * speed + uy.abs() * drift, uy * speed + ux.abs() * drift);
        Ok(ShapeMotion {
            kind,
            direction,
            radius,
            color,
            start: (x, y),
            velocity,
        })
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn shape_label(kind: ShapeKind, direction: Direction) -> String {
    format!("{} moving {}", kind.name(), direction.name())
}

/// Advances `p` by `v` inside `[lo, hi]`, mirroring at the walls.
pub fn bounce_step(p: f64, v: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (mut p, mut v) = (p + v, v);
    if hi <= lo {
        return (lo, 0.0);
    }
    while p < lo || p > hi {
        if p > hi {
            p = 2.0 * hi - p;
        } else {
            p = 2.0 * lo - p;
        }
        v = -v;
    }
    (p, v)
}

/// Centre positions of the shape for every frame.
pub fn motion_path(motion: &ShapeMotion, height: usize, width: usize, frames: usize) -> Vec<(f64, f64)> {
    let r = motion.radius;
    let (mut x, mut y) = motion.start;
    let (mut vx, mut vy) = motion.velocity;
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        if k > 0 {
            (x, vx) = bounce_step(x, vx, r, width as f64 - r);
            (y, vy) = bounce_step(y, vy, r, height as f64 - r);
        }
        out.push((x, y));
    }
    out
}

/// Renders a motion; pixel `(i, j)` is sampled at its centre `(j + 0.5, i + 0.5)`.
pub fn render_motion(motion: &ShapeMotion, spec: &MovingShapesSpec) -> PixelClip {
    let (h, w) = (spec.height, spec.width);
    let mut clip = Clip::zeros(spec.frames, 3, h, w);
    let path = motion_path(motion, h, w, spec.frames);
    for (k, &(cx, cy)) in path.iter().enumerate() {
        let frame = clip.frame_mut(k);
        for i in 0..h {
            for j in 0..w {
                let dx = j as f64 + 0.5 - cx;
                let dy = i as f64 + 0.5 - cy;
                let inside = match motion.kind {
                    ShapeKind::Disc => dx * dx + dy * dy <= motion.radius * motion.radius,
                    ShapeKind::Square => dx.abs() <= motion.radius && dy.abs() <= motion.radius,
                };
                let c = if inside { motion.color } else { spec.background };
                for ch in 0..3 {
                    frame[(ch * h + i) * w + j] = c[ch];
                }
            }
        }
    }
    clip
}

/// One seeded clip and its label.
pub fn gen_moving_shapes(spec: &MovingShapesSpec, seed: u64) -> Result<(PixelClip, String)> {
    let motion = spec.draw_motion(seed)?;
    let label = shape_label(motion.kind, motion.direction);
    Ok((render_motion(&motion, spec), label))
}

/// Axis-aligned rectangle in source pixel units, `(x, y)` its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn full(height: usize, width: usize) -> Rect {
        Rect {
            x: 0.0,
            y: 0.0,
            w: width as f64,
            h: height as f64,
        }
    }

    pub fn lerp(&self, other: &Rect, u: f64) -> Rect {
        let l = |a: f64, b: f64| a + (b - a) * u;
        Rect {
            x: l(self.x, other.x),
            y: l(self.y, other.y),
            w: l(self.w, other.w),
            h: l(self.h, other.h),
        }
    }

    fn check_within(&self, height: usize, width: usize) -> Result<()> {
        let ok = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= width as f64 + 1e-9
            && self.y + self.h <= height as f64 + 1e-9;
        if !ok {
            return Err(Error::Config(format!(
                "rectangle {self:?} is not inside the {height}x{width} source"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoomPanSpec {
    pub start: Rect,
    pub end: Rect,
    pub frames: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Bilinear crop-and-resize of a single-frame image.
///
/// Output pixel `(i, j)` samples the source at
/// `sx = r.x + (j + 0.5) * r.w / W_out - 0.5`, `sy = r.y + (i + 0.5) * r.h / H_out - 0.5`,
/// each clamped to `[0, W-1]` / `[0, H-1]`. With `x0 = floor(sx)`,
/// `x1 = min(x0 + 1, W - 1)`, `fx = sx - x0` (same for y), the value is
/// `(1-fy) * ((1-fx) * I[y0,x0] + fx * I[y0,x1]) + fy * ((1-fx) * I[y1,x0] + fx * I[y1,x1])`,
/// evaluated in f64 and rounded once to f32.
pub fn crop_resize(image: &Clip, rect: &Rect, out_height: usize, out_width: usize) -> Result<Clip> {
    if image.frames != 1 {
        return Err(Error::invalid(format!("expected a single image, got {} frames", image.frames)));
    }
    if out_height == 0 || out_width == 0 {
        return Err(Error::Config("output resolution must be positive".into()));
    }
    rect.check_within(image.height, image.width)?;
    let (h, w) = (image.height, image.width);
    let mut out = Clip::zeros(1, image.channels, out_height, out_width);
    let src = |c: usize, y: usize, x: usize| image.data[(c * h + y) * w + x] as f64;
    for i in 0..out_height {
        let sy = (rect.y + (i as f64 + 0.5) * rect.h / out_height as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for j in 0..out_width {
            let sx = (rect.x + (j as f64 + 0.5) * rect.w / out_width as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..image.channels {
                let top = (1.0 - fx) * src(c, y0, x0) + fx * src(c, y0, x1);
                let bottom = (1.0 - fx) * src(c, y1, x0) + fx * src(c, y1, x1);
                out.data[(c * out_height + i) * out_width + j] = ((1.0 - fy) * top + fy * bottom) as f32;
            }
        }
    }
    Ok(out)
}

/// Rectangle used for frame `k`: `start + (end - start) * k / (F - 1)`.
pub fn zoom_pan_rect(spec: &ZoomPanSpec, k: usize) -> Rect {
    let u = if spec.frames > 1 {
        k as f64 / (spec.frames - 1) as f64
    } else {
        0.0
    };
    spec.start.lerp(&spec.end, u)
}

/// Pseudo-video from one still image by a linear zoom/pan.
pub fn make_pseudo_video(image: &Clip, spec: &ZoomPanSpec) -> Result<PixelClip> {
    if spec.frames == 0 {
        return Err(Error::Config("pseudo-video needs at least one frame".into()));
    }
    spec.start.check_within(image.height, image.width)?;
    spec.end.check_within(image.height, image.width)?;
    let frames = (0..spec.frames)
        .into_par_iter()
        .map(|k| crop_resize(image, &zoom_pan_rect(spec, k), spec.out_height, spec.out_width))
        .collect::<Result<Vec<_>>>()?;
    Clip::concat(&frames)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentDecision {
    pub keep_mask: Vec<bool>,
    /// Half-open `[start, end)` frame intervals.
    pub segments: Vec<(usize, usize)>,
    pub min_len: usize,
}

/// Keeps frames scoring at least `keep_threshold` and returns the maximal
/// kept runs of at least `min_len` frames.
pub fn segment_video(scores: &[f64], keep_threshold: f64, min_len: usize) -> Result<SegmentDecision> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot segment an empty video"));
    }
    if min_len == 0 {
        return Err(Error::invalid("min_len must be at least 1"));
    }
    let keep_mask: Vec<bool> = scores.iter().map(|&s| s >= keep_threshold).collect();
    let mut segments = Vec::new();
    let mut start = None;
    for (k, &keep) in keep_mask.iter().chain(std::iter::once(&false)).enumerate() {
        match (keep, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                if k - s >= min_len {
                    segments.push((s, k));
                }
                start = None;
            }
            _ => {}
        }
    }
    Ok(SegmentDecision {
        keep_mask,
        segments,
        min_len,
    })
}

/// Relevance of a frame to a label; higher is more relevant.
pub trait FrameScorer: Sync {
    fn score(&self, frame: &Clip, label: &str) -> Result<f64>;
}

/// Produces a caption for a run of frames.
pub trait Captioner: Sync {
    fn caption(&self, frames: &Clip, label: &str, template_id: usize, template: &str) -> Result<String>;
}

/// Per-frame score: the minimum over several scorers, so a frame is dropped
/// when any one of them rejects it.
pub fn frame_scores(video: &Clip, label: &str, scorers: &[&dyn FrameScorer]) -> Result<Vec<f64>> {
    if scorers.is_empty() {
        return Err(Error::invalid("need at least one scorer"));
    }
    (0..video.frames)
        .map(|k| {
            let frame = video.frame_clip(k);
            let mut best = f64::INFINITY;
            for s in scorers {
                best = best.min(s.score(&frame, label)?);
            }
            Ok(best)
        })
        .collect()
}

/// Fills the `{label}` placeholder of a caption template.
pub fn fill_template(template: &str, label: &str) -> String {
    template.replace("{label}", label)
}

pub fn default_templates() -> Vec<String> {
    vec![
        "{label}".into(),
        "a video of {label}".into(),
        "{label}, smooth motion".into(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPolicy {
    pub templates: Vec<String>,
    pub seed: u64,
    /// Attempts per segment after the first one, for retryable failures.
    pub retries: usize,
}

impl Default for CaptionPolicy {
    fn default() -> Self {
        CaptionPolicy {
            templates: default_templates(),
            seed: 0,
            retries: 2,
        }
    }
}

impl CaptionPolicy {
    /// Template for item `index`, drawn from its own seeded stream.
    pub fn template_for(&self, index: usize) -> Result<usize> {
        if self.templates.is_empty() {
            return Err(Error::Config("template list is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        Ok(rng.random_range(0..self.templates.len()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCaption {
    pub segment: (usize, usize),
    pub template_id: usize,
    /// `None` if every attempt failed; see `error`.
    pub caption: Option<String>,
    pub attempts: usize,
    pub error: Option<String>,
}

fn is_retryable(e: &Error) -> bool {
    matches!(e, Error::Transport(_))
}

fn caption_with_retries(
    client: &dyn Captioner,
    frames: &Clip,
    label: &str,
    template_id: usize,
    template: &str,
    retries: usize,
) -> (Option<String>, usize, Option<String>) {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match client.caption(frames, label, template_id, template) {
            Ok(c) => return (Some(c), attempts, None),
            Err(e) if is_retryable(&e) && attempts <= retries => {
                log::warn!("captioner attempt {attempts} failed: {e}; retrying");
            }
            Err(e) => return (None, attempts, Some(e.to_string())),
        }
    }
}

/// Captions every surviving segment. Calls run concurrently; results are
/// ordered by segment. A segment whose captioning fails keeps `caption = None`.
pub fn caption_segments(
    decision: &SegmentDecision,
    video: &Clip,
    label: &str,
    client: &dyn Captioner,
    policy: &CaptionPolicy,
) -> Result<Vec<SegmentCaption>> {
    if decision.keep_mask.len() != video.frames {
        return Err(Error::ShapeMismatch {
            expected: vec![video.frames],
            got: vec![decision.keep_mask.len()],
        });
    }
    decision
        .segments
        .par_iter()
        .enumerate()
        .map(|(idx, &(s, e))| {
            if s >= e || e > video.frames {
                return Err(Error::invalid(format!("segment [{s}, {e}) outside the video")));
            }
            let template_id = policy.template_for(idx)?;
            let frames = Clip::concat(&(s..e).map(|k| video.frame_clip(k)).collect::<Vec<_>>())?;
            let (caption, attempts, error) =
                caption_with_retries(client, &frames, label, template_id, &policy.templates[template_id], policy.retries);
            Ok(SegmentCaption {
                segment: (s, e),
                template_id,
                caption,
                attempts,
                error,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortCaption {
    pub frame_index: usize,
    pub template_id: usize,
    pub caption: String,
}

/// Short clips are captioned from one seeded random frame.
pub fn caption_short_video(
    video: &Clip,
    label: &str,
    client: &dyn Captioner,
    policy: &CaptionPolicy,
    index: usize,
) -> Result<ShortCaption> {
    if video.frames == 0 {
        return Err(Error::invalid("cannot caption an empty clip"));
    }
    let template_id = policy.template_for(index)?;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed ^ 0x5eed_f4a3);
    rng.set_stream(index as u64);
    let frame_index = rng.random_range(0..video.frames);
    let frame = video.frame_clip(frame_index);
    let (caption, _, error) =
        caption_with_retries(client, &frame, label, template_id, &policy.templates[template_id], policy.retries);
    let caption = caption.ok_or_else(|| Error::Transport(error.unwrap_or_default()))?;
    Ok(ShortCaption {
        frame_index,
        template_id,
        caption,
    })
}

/// Frames on the wire: little-endian f32 values, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub encoding: String,
    pub data: String,
}

pub const PAYLOAD_ENCODING: &str = "f32le-base64";

impl FramePayload {
    pub fn encode(clip: &Clip) -> Self {
        FramePayload {
            frames: clip.frames,
            channels: clip.channels,
            height: clip.height,
            width: clip.width,
            encoding: PAYLOAD_ENCODING.into(),
            data: base64::engine::general_purpose::STANDARD.encode(clip.to_le_bytes()),
        }
    }

    pub fn decode(&self) -> Result<Clip> {
        if self.encoding != PAYLOAD_ENCODING {
            return Err(Error::Format(format!("unsupported frame encoding {}", self.encoding)));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Format(format!("bad base64 frame payload: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format("frame payload is not a whole number of f32 values".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Clip::from_vec(self.frames, self.channels, self.height, self.width, data)
    }
}

/// Request sent to an external client, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ClientRequest {
    Score {
        frame: FramePayload,
        label: String,
    },
    Caption {
        frames: FramePayload,
        label: String,
        template_id: usize,
        template: String,
    },
}

/// Reply from an external client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClientResponse {
    Score { score: f64 },
    Caption { caption: String },
    Error { error: String },
}

/// Deterministic stand-in for the vision-language models, configured from
/// a JSON file. A frame's score is `min(1, gain * mean brightness)` unless
/// the label has a fixed score; captions fill the template with the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockClient {
    #[serde(default = "default_gain")]
    pub brightness_gain: f64,
    #[serde(default)]
    pub label_scores: BTreeMap<String, f64>,
}

fn default_gain() -> f64 {
    4.0
}

impl Default for MockClient {
    fn default() -> Self {
        MockClient {
            brightness_gain: default_gain(),
            label_scores: BTreeMap::new(),
        }
    }
}

impl MockClient {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Answers one wire request, as a subprocess client would.
    pub fn respond(&self, req: &ClientRequest) -> ClientResponse {
        let out = match req {
            ClientRequest::Score { frame, label } => frame
                .decode()
                .and_then(|f| self.score(&f, label))
                .map(|score| ClientResponse::Score { score }),
            ClientRequest::Caption {
                frames,
                label,
                template_id,
                template,
            } => frames
                .decode()
                .and_then(|f| self.caption(&f, label, *template_id, template))
                .map(|caption| ClientResponse::Caption { caption }),
        };
        out.unwrap_or_else(|e| ClientResponse::Error { error: e.to_string() })
    }
}

impl FrameScorer for MockClient {
    fn score(&self, frame: &Clip, label: &str) -> Result<f64> {
        if let Some(&s) = self.label_scores.get(label) {
            return Ok(s);
        }
        if frame.data.is_empty() {
            return Ok(0.0);
        }
        let mean = frame.data.iter().map(|&v| v as f64).sum::<f64>() / frame.data.len() as f64;
        Ok((self.brightness_gain * mean).clamp(0.0, 1.0))
    }
}

impl Captioner for MockClient {
    fn caption(&self, _frames: &Clip, label: &str, _template_id: usize, template: &str) -> Result<String> {
        Ok(fill_template(template, label))
    }
}

/// Client that runs an external program per request: the request JSON is
/// written to its stdin as one line, and the first stdout line is the reply.
/// Spawn failures, non-zero exits, and unreadable replies are transport errors.
#[derive(Debug, Clone)]
pub struct SubprocessClient {
    pub program: String,
    pub args: Vec<String>,
}

impl SubprocessClient {
    pub fn call(&self, req: &ClientRequest) -> Result<ClientResponse> {
        let transport = |m: String| Error::Transport(format!("{}: {m}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| transport(e.to_string()))?;
        let line = serde_json::to_string(req)?;
        {
            let mut stdin = child.stdin.take().ok_or_else(|| transport("no stdin".into()))?;
            writeln!(stdin, "{line}").map_err(|e| transport(e.to_string()))?;
        }
        let stdout = child.stdout.take().ok_or_else(|| transport("no stdout".into()))?;
        let mut reply = String::new();
        BufReader::new(stdout)
            .read_line(&mut reply)
            .map_err(|e| transport(e.to_string()))?;
        let status = child.wait().map_err(|e| transport(e.to_string()))?;
        if !status.success() {
            return Err(transport(format!("exited with {status}")));
        }
        serde_json::from_str(reply.trim()).map_err(|e| transport(format!("unreadable reply: {e}")))
    }
}

impl FrameScorer for SubprocessClient {
    fn score(&self, frame: &Clip, label: &str) -> Result<f64> {
        let req = ClientRequest::Score {
            frame: FramePayload::encode(frame),
            label: label.into(),
        };
        match self.call(&req)? {
            ClientResponse::Score { score } => Ok(score),
            ClientResponse::Error { error } => Err(Error::Transport(error)),
            other => Err(Error::Transport(format!("unexpected reply {other:?}"))),
        }
    }
}

impl Captioner for SubprocessClient {
    fn caption(&self, frames: &Clip, label: &str, template_id: usize, template: &str) -> Result<String> {
        let req = ClientRequest::Caption {
            frames: FramePayload::encode(frames),
            label: label.into(),
            template_id,
            template: template.into(),
        };
        match self.call(&req)? {
            ClientResponse::Caption { caption } => Ok(caption),
            ClientResponse::Error { error } => Err(Error::Transport(error)),
            other => Err(Error::Transport(format!("unexpected reply {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub seed: u64,
    pub label: String,
    pub caption: Option<String>,
    /// sha256 of the clip's little-endian f32 bytes.
    pub digest: String,
}

/// Everything needed to regenerate a moving-shapes dataset exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: MovingShapesSpec,
    pub items: Vec<DatasetItem>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Generates one clip per seed, captioning each from a random frame.
pub fn build_dataset(
    spec: &MovingShapesSpec,
    seeds: &[u64],
    captioner: Option<(&dyn Captioner, &CaptionPolicy)>,
) -> Result<(Vec<PixelClip>, DatasetManifest)> {
    spec.validate()?;
    let generated = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let (clip, label) = gen_moving_shapes(spec, seed)?;
            let caption = match captioner {
                Some((c, policy)) => Some(caption_short_video(&clip, &label, c, policy, i)?.caption),
                None => None,
            };
            let digest = sha256_hex(&clip.to_le_bytes());
            Ok((clip, DatasetItem { seed, label, caption, digest }))
        })
        .collect::<Result<Vec<_>>>()?;
    let (clips, items) = generated.into_iter().unzip();
    Ok((
        clips,
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            spec: spec.clone(),
            items,
        },
    ))
}

/// Re-renders a manifest's clips and checks each digest.
pub fn regenerate(manifest: &DatasetManifest) -> Result<Vec<PixelClip>> {
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "dataset manifest version {} is not supported",
            manifest.format_version
        )));
    }
    manifest
        .items
        .par_iter()
        .map(|item| {
            let (clip, label) = gen_moving_shapes(&manifest.spec, item.seed)?;
            let digest = sha256_hex(&clip.to_le_bytes());
            if digest != item.digest || label != item.label {
                return Err(Error::DigestMismatch(format!("dataset item with seed {}", item.seed)));
            }
            Ok(clip)
        })
        .collect()
}
