//! Token-sequence framing for the world model.
//!
//! Each frame contributes `n` image tokens followed by one end-of-image marker,
//! `n' = n + 1` entries per frame. Codebook index `i` is stored as token
//! `i + 1`; token 0 is reserved for the marker.

use crate::error::{Error, Result};
use crate::vq::IndexGrid;

pub const END_OF_IMAGE: u32 = 0;

/// Turns a prompt into text-token indices.
pub trait TextCodec {
    fn name(&self) -> &str;
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
}

/// One token per UTF-8 byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteCodec;

impl TextCodec for ByteCodec {
    fn name(&self) -> &str {
        "bytes"
    }

    fn vocab_size(&self) -> usize {
        256
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(text.bytes().map(u32::from).collect())
    }
}

pub const DEFAULT_PROMPT: &str = "Generate a video of driving vehicles";

pub fn frame_text_prompt(prompt: &str, codec: &dyn TextCodec) -> Result<Vec<u32>> {
    let ids = codec.encode(prompt)?;
    if let Some(bad) = ids.iter().find(|&&i| i as usize >= codec.vocab_size()) {
        return Err(Error::Config(format!(
            "codec {} produced token {bad} outside its vocabulary",
            codec.name()
        )));
    }
    Ok(ids)
}

/// Text prefix plus framed image tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramedSequence {
    pub text: Vec<u32>,
    pub image: Vec<u32>,
    pub tokens_per_frame: usize,
}

impl FramedSequence {
    pub fn new(text: Vec<u32>, grids: &[IndexGrid]) -> Result<Self> {
        let tokens_per_frame = grids.first().map(IndexGrid::len).unwrap_or(0);
        Ok(Self {
            text,
            image: frame_indices(grids)?,
            tokens_per_frame,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.image.len() / (self.tokens_per_frame + 1)
    }
}

/// `(index + 1)` for each grid entry, then the marker, frame after frame.
pub fn frame_indices(grids: &[IndexGrid]) -> Result<Vec<u32>> {
    let Some(first) = grids.first() else {
        return Ok(Vec::new());
    };
    let n = first.len();
    let mut out = Vec::with_capacity(grids.len() * (n + 1));
    for g in grids {
        if g.len() != n {
            return Err(Error::Dimension(format!(
                "grids differ in size: {} vs {n}",
                g.len()
            )));
        }
        out.extend(g.indices().iter().map(|&i| i + 1));
        out.push(END_OF_IMAGE);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnframeMode {
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unframed {
    pub grids: Vec<IndexGrid>,
    /// Positions changed or dropped to restore the block structure.
    pub repairs: usize,
}

/// Inverse of [`frame_indices`]. Positions in errors are 1-based.
///
/// Lenient mode forces a marker into every `n'`-th slot, maps stray markers
/// inside a block to token 1 (codebook index 0) and drops a trailing partial
/// block; each changed or dropped entry counts as one repair.
pub fn unframe_indices(seq: &[u32], grid: (usize, usize), mode: UnframeMode) -> Result<Unframed> {
    let n = grid.0 * grid.1;
    let stride = n + 1;
    if mode == UnframeMode::Strict && seq.len() % stride != 0 {
        return Err(Error::Structure {
            position: seq.len(),
            reason: format!("length {} is not a multiple of {stride}", seq.len()),
        });
    }
    let mut repairs = seq.len() % stride;
    let mut grids = Vec::with_capacity(seq.len() / stride);
    for (b, block) in seq.chunks_exact(stride).enumerate() {
        let mut idx = Vec::with_capacity(n);
        for (j, &tok) in block[..n].iter().enumerate() {
            if tok == END_OF_IMAGE {
                if mode == UnframeMode::Strict {
                    return Err(Error::Structure {
                        position: b * stride + j + 1,
                        reason: "end-of-image marker inside a frame block".into(),
                    });
                }
                repairs += 1;
                idx.push(0);
            } else {
                idx.push(tok - 1);
            }
        }
        if block[n] != END_OF_IMAGE {
            if mode == UnframeMode::Strict {
                return Err(Error::Structure {
                    position: (b + 1) * stride,
                    reason: format!("expected end-of-image marker, found {}", block[n]),
                });
            }
            repairs += 1;
        }
        grids.push(IndexGrid::new(idx, grid.0, grid.1)?);
    }
    Ok(Unframed { grids, repairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize, f: impl Fn(usize) -> u32) -> IndexGrid {
        IndexGrid::square((0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn full_size_frame_arithmetic() {
        let two: Vec<_> = (0..2).map(|_| grid(256, |i| (i % 7) as u32)).collect();
        let seq = frame_indices(&two).unwrap();
        assert_eq!(seq.len(), 514);
        let zeros: Vec<usize> = seq.iter().enumerate().filter(|(_, &v)| v == 0).map(|(i, _)| i + 1).collect();
        assert_eq!(zeros, vec![257, 514]);
        let sixteen: Vec<_> = (0..16).map(|_| grid(256, |i| i as u32)).collect();
        assert_eq!(frame_indices(&sixteen).unwrap().len(), 4112);
    }

    #[test]
    fn prompt_framing() {
        assert!(frame_text_prompt("", &ByteCodec).unwrap().is_empty());
        let ids = frame_text_prompt(DEFAULT_PROMPT, &ByteCodec).unwrap();
        assert_eq!(ids.len(), DEFAULT_PROMPT.len());
        assert_eq!(ids, frame_text_prompt(DEFAULT_PROMPT, &ByteCodec).unwrap());
    }

    #[test]
    fn strict_reports_first_violation() {
        let grids: Vec<_> = (0..2).map(|_| grid(256, |_| 3)).collect();
        let mut seq = frame_indices(&grids).unwrap();
        seq[199] = 0;
        match unframe_indices(&seq, (16, 16), UnframeMode::Strict) {
            Err(Error::Structure { position, .. }) => assert_eq!(position, 200),
            other => panic!("{other:?}"),
        }
        let mut seq = frame_indices(&grids).unwrap();
        seq[256] = 9;
        match unframe_indices(&seq, (16, 16), UnframeMode::Strict) {
            Err(Error::Structure { position, .. }) => assert_eq!(position, 257),
            other => panic!("{other:?}"),
        }
        assert!(unframe_indices(&seq[..300], (16, 16), UnframeMode::Strict).is_err());
    }

    fn scan_repairs(seq: &[u32], stride: usize) -> usize {
        let full = seq.len() / stride * stride;
        let mut count = seq.len() - full;
        for (i, &v) in seq[..full].iter().enumerate() {
            let marker_slot = (i + 1) % stride == 0;
            if marker_slot != (v == 0) {
                count += 1;
            }
        }
        count
    }

    proptest! {
        #[test]
        fn round_trip(side in 1usize..6, frames in 1usize..5, seed in any::<u64>()) {
            let n = side * side;
            let grids: Vec<_> = (0..frames)
                .map(|f| grid(n, |i| ((seed >> (i % 50)) as usize ^ (f * 31 + i)) as u32 % 64))
                .collect();
            let seq = frame_indices(&grids).unwrap();
            let back = unframe_indices(&seq, (side, side), UnframeMode::Strict).unwrap();
            prop_assert_eq!(back.grids, grids);
            prop_assert_eq!(back.repairs, 0);
        }

        #[test]
        fn lenient_repairs_match_scan(seq in proptest::collection::vec(0u32..4, 0..60)) {
            let out = unframe_indices(&seq, (2, 2), UnframeMode::Lenient).unwrap();
            prop_assert_eq!(out.repairs, scan_repairs(&seq, 5));
            prop_assert_eq!(out.grids.len(), seq.len() / 5);
        }
    }
}
