//! Deterministic sample streams for the three trainable stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::clip::{subsample_clip, Split, VideoClip};
use crate::data::frame::{preprocess_image, Frame};
use crate::data::io::load_raw_clip;
use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Single frames (tokenizer / image decoder).
    Image,
    /// Sliding 3-frame windows (video decoder).
    Video3 { stride: usize },
    /// Non-overlapping windows of `initial + predicted` frames (world model).
    Prediction { initial: usize, predicted: usize },
}

impl SampleMode {
    pub fn window(&self) -> (usize, usize) {
        match *self {
            SampleMode::Image => (1, 1),
            SampleMode::Video3 { stride } => (3, stride.max(1)),
            SampleMode::Prediction { initial, predicted } => {
                let len = initial + predicted;
                (len, len)
            }
        }
    }
}

/// Start offsets of every complete window in a clip of `len` frames.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window == 0 || len < window {
        return Vec::new();
    }
    (0..=len - window).step_by(stride.max(1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub clip: usize,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub scale: f64,
    pub crop: usize,
    pub target_fps: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            scale: 0.5,
            crop: 256,
            target_fps: 4.0,
        }
    }
}

/// Preprocessed clips of one split, loaded in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn from_clips(clips: Vec<VideoClip>) -> Self {
        Self { clips }
    }

    /// Loads and preprocesses every clip of `split`. Clips decode in parallel;
    /// the resulting order is manifest order regardless of worker count.
    pub fn load(manifest: &DatasetManifest, split: Split, pre: PreprocessConfig) -> Result<Self> {
        let records: Vec<_> = manifest.split(split).collect();
        let clips = records
            .par_iter()
            .map(|r| {
                let raw = load_raw_clip(&manifest.resolve(r))?;
                let raw = subsample_clip(&raw, r.source_fps, pre.target_fps)?;
                let frames = raw
                    .iter()
                    .map(|f| preprocess_image(f, pre.scale, pre.crop))
                    .collect::<Result<Vec<_>>>()?;
                if frames.is_empty() {
                    log::warn!("clip {} has no frames after subsampling; skipped", r.clip_path);
                    return Ok(None);
                }
                VideoClip::new(frames, pre.target_fps, split).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clips: clips.into_iter().flatten().collect(),
        })
    }

    pub fn clips(&self) -> &[VideoClip] {
        &self.clips
    }

    /// Every sample of `mode`, shuffled by `seed`. Clips too short for the
    /// window are skipped with a warning.
    pub fn sample_refs(&self, mode: SampleMode, seed: u64) -> Vec<SampleRef> {
        let (window, stride) = mode.window();
        let mut refs = Vec::new();
        for (ci, clip) in self.clips.iter().enumerate() {
            let starts = window_starts(clip.len(), window, stride);
            if starts.is_empty() {
                log::warn!(
                    "clip {ci} has {} frames, shorter than window {window}; skipped",
                    clip.len()
                );
            }
            refs.extend(starts.into_iter().map(|start| SampleRef { clip: ci, start }));
        }
        refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        refs
    }

    pub fn get(&self, r: SampleRef, mode: SampleMode) -> Result<Vec<Frame>> {
        let (window, _) = mode.window();
        let clip = self
            .clips
            .get(r.clip)
            .ok_or_else(|| Error::Parameter(format!("no clip {}", r.clip)))?;
        let frames = clip
            .frames()
            .get(r.start..r.start + window)
            .ok_or_else(|| Error::Parameter(format!("window at {} out of range", r.start)))?;
        Ok(frames.to_vec())
    }

    /// Endless epoch-cycling stream; epoch `e` is shuffled with `seed + e`.
    pub fn stream(&self, mode: SampleMode, seed: u64) -> SampleStream<'_> {
        SampleStream {
            data: self,
            mode,
            seed,
            epoch: 0,
            order: self.sample_refs(mode, seed),
            pos: 0,
        }
    }
}

pub struct SampleStream<'a> {
    data: &'a Dataset,
    mode: SampleMode,
    seed: u64,
    epoch: u64,
    order: Vec<SampleRef>,
    pos: usize,
}

impl SampleStream<'_> {
    pub fn next_batch(&mut self, batch: usize) -> Result<Vec<Vec<Frame>>> {
        if self.order.is_empty() {
            return Err(Error::Config("sample stream is empty: no clip fits the window".into()));
        }
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.order = self.data.sample_refs(self.mode, self.seed.wrapping_add(self.epoch));
                self.pos = 0;
            }
            out.push(self.data.get(self.order[self.pos], self.mode)?);
            self.pos += 1;
        }
        Ok(out)
    }
}
