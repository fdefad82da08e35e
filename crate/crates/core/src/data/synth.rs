//! Synthetic moving-square videos for desk-scale training and tests.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::clip::Split;
use crate::data::io::write_raw_frames;
use crate::data::manifest::{DatasetManifest, ManifestRecord};
use crate::error::Result;

pub const SYNTH_SOURCE_FPS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub seed: u64,
}

/// One clip: a solid square bouncing off the borders over a flat background.
pub fn moving_square_clip(width: u32, height: u32, frames: usize, rng: &mut impl Rng) -> Vec<RgbImage> {
    let side = (width.min(height) * 5 / 16).max(2) as i64;
    let (w, h) = (width as i64, height as i64);
    let bg = Rgb([rng.random_range(10..70), rng.random_range(10..70), rng.random_range(10..70)]);
    let fg = Rgb([
        rng.random_range(150..=255),
        rng.random_range(150..=255),
        rng.random_range(150..=255),
    ]);
    let step = (width.min(height) as i64 / 32).max(1);
    let mut x = rng.random_range(0..=(w - side));
    let mut y = rng.random_range(0..=(h - side));
    let mut vx = rng.random_range(1..=2) * step * if rng.random_bool(0.5) { 1 } else { -1 };
    let mut vy = rng.random_range(1..=2) * step * if rng.random_bool(0.5) { 1 } else { -1 };
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut img = RgbImage::from_pixel(width, height, bg);
        for py in y..y + side {
            for px in x..x + side {
                img.put_pixel(px as u32, py as u32, fg);
            }
        }
        out.push(img);
        if x + vx < 0 || x + vx + side > w {
            vx = -vx;
        }
        if y + vy < 0 || y + vy + side > h {
            vy = -vy;
        }
        x += vx;
        y += vy;
    }
    out
}

/// Writes `spec.count` clips under `dir` plus `dir/manifest.tsv`. Every fifth
/// clip goes to the validation split.
pub fn write_synthetic_corpus(dir: &Path, spec: SynthSpec) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let frames = moving_square_clip(spec.width, spec.height, spec.frames, &mut rng);
        let rel = format!("clip_{i:04}");
        write_raw_frames(&frames, &dir.join(&rel))?;
        records.push(ManifestRecord {
            clip_path: rel,
            split: if i % 5 == 4 { Split::Val } else { Split::Train },
            source_fps: SYNTH_SOURCE_FPS,
        });
    }
    let manifest = DatasetManifest::new(dir, records)?;
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_stays_inside_and_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = moving_square_clip(64, 48, 40, &mut rng);
        assert_eq!(clip.len(), 40);
        assert_ne!(clip[0], clip[1]);
        let bg = *clip[0].get_pixel(0, 0);
        for img in &clip {
            let lit = img.pixels().filter(|p| **p != bg).count();
            // 15x15 square, unless it happens to cover the probe corner
            assert!(lit == 15 * 15 || lit == 64 * 48 - 15 * 15, "{lit}");
        }
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec { count: 3, width: 32, height: 32, frames: 4, seed: 9 };
        let ma = write_synthetic_corpus(a.path(), spec).unwrap();
        write_synthetic_corpus(b.path(), spec).unwrap();
        assert_eq!(ma.records.len(), 3);
        let fa = std::fs::read(a.path().join("clip_0002/frame_00003.png")).unwrap();
        let fb = std::fs::read(b.path().join("clip_0002/frame_00003.png")).unwrap();
        assert_eq!(fa, fb);
        let loaded = DatasetManifest::load(&a.path().join("manifest.tsv")).unwrap();
        assert_eq!(loaded.records, ma.records);
    }
}
