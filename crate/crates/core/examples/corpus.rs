// Writes a small synthetic moving-square corpus, loads it back through the
// manifest at 4 fps and draws samples for each training stage.

use tokvid::data::{write_synthetic_corpus, Dataset, PreprocessConfig, SampleMode, Split, SynthSpec};

fn main() -> tokvid::Result<()> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let spec = SynthSpec { count: 5, width: 64, height: 64, frames: 24, seed: 7 };
    let manifest = write_synthetic_corpus(dir.path(), spec)?;
    println!("{} clips, manifest:\n{}", manifest.records.len(), manifest.to_text());

    // halve the resolution, keep a centred 32x32 crop, 8 fps -> 4 fps
    let pre = PreprocessConfig { scale: 0.5, crop: 32, target_fps: 4.0 };
    let train = Dataset::load(&manifest, Split::Train, pre)?;
    let clip = &train.clips()[0];
    println!("train clip: {} frames of {}x{}", clip.len(), clip.frames()[0].height(), clip.frames()[0].width());

    for mode in [
        SampleMode::Image,
        SampleMode::Video3 { stride: 1 },
        SampleMode::Prediction { initial: 2, predicted: 4 },
    ] {
        let refs = train.sample_refs(mode, 0);
        let sample = train.get(refs[0], mode)?;
        println!("{mode:?}: {} samples, {} frames each", refs.len(), sample.len());
    }

    // the same seed gives the same order
    assert_eq!(train.sample_refs(SampleMode::Image, 3), train.sample_refs(SampleMode::Image, 3));
    Ok(())
}
