//! Temporal-consistency diagnostics for generated videos.
//!
//! All metrics are pure and work in either pixel or latent space. Frame
//! order matters: `smoothness` compares neighbouring frames, and
//! `cycling_score` pairs frame `j` of the next clip with frame `N - 1 - j` of
//! the previous one. `cycling_score` normalises each frame, so adding a
//! constant to a clip leaves it unchanged.

use serde::{Deserialize, Serialize};

use crate::clip::Clip;
use crate::error::{Error, Result};

/// Label recorded for the distribution metrics this crate cannot compute.
pub const NOT_COMPUTED: &str = "not computed — requires pretrained video classifiers";

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    s / a.len().max(1) as f64
}

/// Mean absolute difference between the last frame of `a` and the first of `b`.
pub fn boundary_consistency(a: &Clip, b: &Clip) -> Result<f64> {
    a.check_shape(b)?;
    if a.frames == 0 {
        return Err(Error::invalid("clips have no frames"));
    }
    Ok(mean_abs_diff(a.frame(a.frames - 1), b.frame(0)))
}

/// Mean absolute difference between adjacent frames; 0 for a single frame.
pub fn smoothness(clip: &Clip) -> f64 {
    if clip.frames < 2 {
        return 0.0;
    }
    let s: f64 = (1..clip.frames)
        .map(|k| mean_abs_diff(clip.frame(k - 1), clip.frame(k)))
        .sum();
    s / (clip.frames - 1) as f64
}

/// Pearson correlation of two equally long vectors; `None` if either is constant.
pub fn normalized_correlation(a: &[f32], b: &[f32]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (*x as f64 - ma, *y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// How much `next` replays `prev` backwards: the mean correlation of
/// `next[j]` with `prev[N-1-j]`. Frame pairs with a constant frame count as 0.
pub fn cycling_score(prev: &Clip, next: &Clip) -> Result<f64> {
    prev.check_shape(next)?;
    let n = prev.frames;
    if n == 0 {
        return Err(Error::invalid("clips have no frames"));
    }
    let mut total = 0.0;
    for j in 0..n {
        match normalized_correlation(next.frame(j), prev.frame(n - 1 - j)) {
            Some(c) => total += c,
            None => log::warn!("zero-variance frame in cycling score (frame {j}); counted as 0"),
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSpace {
    Pixel,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    /// Index of the earlier clip of the pair.
    pub clip: usize,
    pub boundary_consistency: f64,
    pub cycling_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub space: MetricSpace,
    pub num_clips: usize,
    pub pairs: Vec<PairMetrics>,
    pub smoothness: Vec<f64>,
    pub mean_boundary_consistency: Option<f64>,
    pub mean_cycling_score: Option<f64>,
    pub mean_smoothness: f64,
    pub fvd: String,
    pub inception_score: String,
    /// Digest of the run this report describes.
    pub run_digest: Option<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Metrics over consecutive clips of one long video.
pub fn evaluate(clips: &[Clip], space: MetricSpace, run_digest: Option<String>) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips to evaluate"));
    }
    let pairs = clips
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            Ok(PairMetrics {
                clip: i,
                boundary_consistency: boundary_consistency(&w[0], &w[1])?,
                cycling_score: cycling_score(&w[0], &w[1])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let smooth: Vec<f64> = clips.iter().map(smoothness).collect();
    Ok(MetricsReport {
        space,
        num_clips: clips.len(),
        mean_boundary_consistency: mean(pairs.iter().map(|p| p.boundary_consistency)),
        mean_cycling_score: mean(pairs.iter().map(|p| p.cycling_score)),
        mean_smoothness: mean(smooth.iter().copied()).unwrap_or(0.0),
        pairs,
        smoothness: smooth,
        fvd: NOT_COMPUTED.into(),
        inception_score: NOT_COMPUTED.into(),
        run_digest,
    })
}
