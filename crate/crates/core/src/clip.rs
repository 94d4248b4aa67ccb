use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `[frames, channels, height, width]` f32 tensor.
///
/// Used for both latent clips and pixel clips; pixel clips carry three
/// channels with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub type LatentClip = Clip;
pub type PixelClip = Clip;

impl Clip {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self::filled(frames, channels, height, width, 0.0)
    }

    pub fn filled(frames: usize, channels: usize, height: usize, width: usize, v: f32) -> Self {
        Clip {
            frames,
            channels,
            height,
            width,
            data: vec![v; frames * channels * height * width],
        }
    }

    pub fn from_vec(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let n = frames * channels * height * width;
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                expected: vec![n],
                got: vec![data.len()],
            });
        }
        Ok(Clip {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    /// Stacks equally shaped single frames (each `[C, H, W]`) into a clip.
    pub fn from_frames(frames: &[Vec<f32>], channels: usize, height: usize, width: usize) -> Result<Self> {
        let fl = channels * height * width;
        let mut data = Vec::with_capacity(frames.len() * fl);
        for f in frames {
            if f.len() != fl {
                return Err(Error::ShapeMismatch {
                    expected: vec![fl],
                    got: vec![f.len()],
                });
            }
            data.extend_from_slice(f);
        }
        Clip::from_vec(frames.len(), channels, height, width, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, j: usize) -> &[f32] {
        let fl = self.frame_len();
        &self.data[j * fl..(j + 1) * fl]
    }

    pub fn frame_mut(&mut self, j: usize) -> &mut [f32] {
        let fl = self.frame_len();
        &mut self.data[j * fl..(j + 1) * fl]
    }

    /// A one-frame clip holding a copy of frame `j`.
    pub fn frame_clip(&self, j: usize) -> Clip {
        Clip {
            frames: 1,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.frame(j).to_vec(),
        }
    }

    pub fn same_shape(&self, other: &Clip) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_shape(&self, other: &Clip) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            })
        }
    }

    /// Frame order reversed: output frame `j` is input frame `F - 1 - j`.
    pub fn reversed(&self) -> Clip {
        let mut out = self.clone();
        for j in 0..self.frames {
            out.frame_mut(j).copy_from_slice(self.frame(self.frames - 1 - j));
        }
        out
    }

    /// Concatenates clips along the frame axis.
    pub fn concat(clips: &[Clip]) -> Result<Clip> {
        let first = clips
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero clips"))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for c in clips {
            if c.channels != first.channels || c.height != first.height || c.width != first.width {
                return Err(Error::ShapeMismatch {
                    expected: first.shape().to_vec(),
                    got: c.shape().to_vec(),
                });
            }
            frames += c.frames;
            data.extend_from_slice(&c.data);
        }
        Clip::from_vec(frames, first.channels, first.height, first.width, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian byte image of the data, used for digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}
