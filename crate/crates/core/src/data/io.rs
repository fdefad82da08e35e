use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;

use crate::data::clip::subsample_clip;
use crate::data::frame::{denormalize, preprocess_image, Frame, RawFrame};
use crate::data::manifest::{DatasetManifest, ManifestRecord};
use crate::data::samples::PreprocessConfig;
use crate::error::{Error, Result};

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Writes frames as `frame_00000.png`, `frame_00001.png`, ... and returns the paths.
pub fn export_frames(frames: &[Frame], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(frame_file_name(i));
            denormalize(f).save(&path)?;
            Ok(path)
        })
        .collect()
}

pub fn write_raw_frames(frames: &[RgbImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in frames.iter().enumerate() {
        img.save(dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

/// Loads every `*.png` in `dir`, sorted by file name.
pub fn load_raw_clip(dir: &Path) -> Result<Vec<RawFrame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let source_id = dir.to_string_lossy().into_owned();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let img = image::open(p)?.to_rgb8();
            RawFrame::new(img, source_id.clone(), i)
        })
        .collect()
}

/// Subsamples and preprocesses every clip of `manifest`, writing the frames
/// under `out` at the same relative paths plus `out/manifest.tsv`. Loading
/// the result with scale 1 and the same crop reproduces the frames to 8-bit
/// precision.
pub fn preprocess_corpus(manifest: &DatasetManifest, pre: PreprocessConfig, out: &Path) -> Result<DatasetManifest> {
    let records = manifest
        .records
        .par_iter()
        .map(|r| {
            let raw = load_raw_clip(&manifest.resolve(r))?;
            let raw = subsample_clip(&raw, r.source_fps, pre.target_fps)?;
            let frames = raw
                .iter()
                .map(|f| preprocess_image(f, pre.scale, pre.crop))
                .collect::<Result<Vec<_>>>()?;
            export_frames(&frames, &out.join(&r.clip_path))?;
            Ok(ManifestRecord {
                clip_path: r.clip_path.clone(),
                split: r.split,
                source_fps: pre.target_fps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = DatasetManifest::new(out, records)?;
    m.save(&out.join("manifest.tsv"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::frame::preprocess_image;

    #[test]
    fn export_then_reload_is_lossless_on_lattice() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..4 * 4 * 3).map(|i| (i * 5) as f32 / 127.5 - 1.0).collect();
        let frame = Frame::new(4, 4, data).unwrap();
        let paths = export_frames(&[frame.clone(), frame.clone()], dir.path()).unwrap();
        assert!(paths[1].ends_with("frame_00001.png"));
        let raw = load_raw_clip(dir.path()).unwrap();
        assert_eq!(raw.len(), 2);
        let back = preprocess_image(&raw[0], 1.0, 4).unwrap();
        for (a, b) in back.data().iter().zip(frame.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn preprocessed_corpus_reloads_identically() {
        use crate::data::{write_synthetic_corpus, Dataset, Split, SynthSpec};
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        let spec = SynthSpec { count: 5, width: 32, height: 32, frames: 8, seed: 2 };
        let m = write_synthetic_corpus(src.path(), spec).unwrap();
        let pre = PreprocessConfig { scale: 0.5, crop: 16, target_fps: 4.0 };
        let out = preprocess_corpus(&m, pre, dst.path()).unwrap();
        assert_eq!(out.records.len(), 5);
        assert!(out.records.iter().all(|r| r.source_fps == 4.0));
        let again = PreprocessConfig { scale: 1.0, crop: 16, target_fps: 4.0 };
        let reloaded = DatasetManifest::load(&dst.path().join("manifest.tsv")).unwrap();
        for split in [Split::Train, Split::Val] {
            let a = Dataset::load(&m, split, pre).unwrap();
            let b = Dataset::load(&reloaded, split, again).unwrap();
            for (ca, cb) in a.clips().iter().zip(b.clips()) {
                for (fa, fb) in ca.frames().iter().zip(cb.frames()) {
                    assert!(fa.data().iter().zip(fb.data()).all(|(x, y)| (x - y).abs() <= 1.0 / 127.5 + 1e-6));
                }
            }
        }
    }
}
