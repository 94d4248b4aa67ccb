//! Frame files: one binary PPM (P6) per frame plus `index.json`.
//!
//! Byte layout of every frame file:
//!
//! ```text
//! "P6\n<width> <height>\n255\n"   ASCII header, single spaces and newlines
//! width * height * 3 bytes        RGB, row-major, top row first
//! ```
//!
//! A float sample `v` is stored as `round(clamp(v, 0, 1) * 255)`; reading
//! maps a byte `b` back to `b / 255`. Frames are named
//! `clip{i:03}_frame{j:03}.ppm`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::clip::{Clip, PixelClip};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const INDEX_VERSION: u32 = 1;

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes one `[3, H, W]` frame as PPM bytes.
pub fn encode_ppm(frame: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if frame.len() != 3 * height * width {
        return Err(Error::ShapeMismatch {
            expected: vec![3, height, width],
            got: vec![frame.len()],
        });
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(frame.len());
    let plane = height * width;
    for p in 0..plane {
        for c in 0..3 {
            out.push(to_byte(frame[c * plane + p]));
        }
    }
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Format("PPM header is not ASCII".into()))
}

/// Decodes a binary PPM with maxval 255 into a one-frame `[1, 3, H, W]` clip.
pub fn decode_ppm(bytes: &[u8]) -> Result<PixelClip> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != "P6" {
        return Err(Error::Format("only binary PPM (P6) is supported".into()));
    }
    let mut num = |name: &str| -> Result<usize> {
        header_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::Format(format!("bad PPM {name}")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} is not supported")));
    }
    let data = bytes
        .get(pos + 1..)
        .filter(|d| d.len() >= width * height * 3)
        .ok_or_else(|| Error::Format("PPM pixel data is truncated".into()))?;
    let plane = width * height;
    let mut out = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = data[p * 3 + c] as f32 / 255.0;
        }
    }
    Clip::from_vec(1, 3, height, width, out)
}

pub fn read_ppm(path: &Path) -> Result<PixelClip> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: &Path, frame: &[f32], height: usize, width: usize) -> Result<()> {
    write_atomic(path, &encode_ppm(frame, height, width)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    pub clip: usize,
    pub frame: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub index_version: u32,
    pub encoding: String,
    pub height: usize,
    pub width: usize,
    pub frames_per_clip: usize,
    pub num_clips: usize,
    pub entries: Vec<FrameEntry>,
}

pub fn frame_file_name(clip: usize, frame: usize) -> String {
    format!("clip{clip:03}_frame{frame:03}.ppm")
}

/// Writes every frame of every clip into `dir` and returns the index
/// (also written to `dir/index.json`).
pub fn write_video(dir: &Path, clips: &[PixelClip]) -> Result<FrameIndex> {
    let first = clips.first().ok_or_else(|| Error::invalid("no clips to write"))?;
    if first.channels != 3 {
        return Err(Error::invalid(format!("frame files need 3 channels, got {}", first.channels)));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        first.check_shape(clip)?;
        for j in 0..clip.frames {
            let bytes = encode_ppm(clip.frame(j), clip.height, clip.width)?;
            let file = frame_file_name(i, j);
            write_atomic(&dir.join(&file), &bytes)?;
            entries.push(FrameEntry {
                file,
                clip: i,
                frame: j,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let index = FrameIndex {
        index_version: INDEX_VERSION,
        encoding: "ppm-p6-rgb8".into(),
        height: first.height,
        width: first.width,
        frames_per_clip: first.frames,
        num_clips: clips.len(),
        entries,
    };
    write_atomic(&dir.join(INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

/// Reads clips back from a directory written by [`write_video`], checking
/// every frame digest.
pub fn read_video(dir: &Path) -> Result<(Vec<PixelClip>, FrameIndex)> {
    let text = fs::read(dir.join(INDEX_FILE)).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let index: FrameIndex = serde_json::from_slice(&text)?;
    if index.index_version != INDEX_VERSION {
        return Err(Error::Format(format!("frame index version {} is not supported", index.index_version)));
    }
    let mut clips = vec![Vec::new(); index.num_clips];
    for e in &index.entries {
        let bytes = fs::read(dir.join(&e.file))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::DigestMismatch(format!("frame file {}", e.file)));
        }
        let frame = decode_ppm(&bytes)?;
        clips
            .get_mut(e.clip)
            .ok_or_else(|| Error::Format(format!("frame {} names clip {} of {}", e.file, e.clip, index.num_clips)))?
            .push((e.frame, frame));
    }
    let clips = clips
        .into_iter()
        .map(|mut frames| {
            frames.sort_by_key(|(j, _)| *j);
            let frames: Vec<Clip> = frames.into_iter().map(|(_, f)| f).collect();
            Clip::concat(&frames)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clips, index))
}
