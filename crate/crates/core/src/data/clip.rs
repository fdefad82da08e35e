use std::fmt;
use std::str::FromStr;

use crate::data::frame::{Frame, RawFrame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Time-ordered normalized frames of uniform shape.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    fps: f64,
    split: Split,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, fps: f64, split: Split) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Dimension("video clip needs at least one frame".into()));
        };
        if !(fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        let shape = (first.height(), first.width());
        if frames.iter().any(|f| (f.height(), f.width()) != shape) {
            return Err(Error::Dimension("clip frames differ in shape".into()));
        }
        Ok(Self { frames, fps, split })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Source indices kept when resampling `len` frames from `source_fps` down to
/// `target_fps`: `floor(j * source / target)` for every full stride.
pub fn subsample_indices(len: usize, source_fps: f64, target_fps: f64) -> Result<Vec<usize>> {
    if !(target_fps > 0.0) || !(source_fps > 0.0) {
        return Err(Error::InvalidRate {
            source_fps,
            target: target_fps,
        });
    }
    if target_fps > source_fps {
        return Err(Error::InvalidRate {
            source_fps,
            target: target_fps,
        });
    }
    let ratio = source_fps / target_fps;
    let count = (len as f64 / ratio + 1e-9).floor() as usize;
    Ok((0..count)
        .map(|j| ((j as f64 * ratio) + 1e-9).floor() as usize)
        .collect())
}

pub fn subsample_clip(frames: &[RawFrame], source_fps: f64, target_fps: f64) -> Result<Vec<RawFrame>> {
    Ok(subsample_indices(frames.len(), source_fps, target_fps)?
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}
