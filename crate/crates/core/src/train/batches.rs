//! Training data: the two splits plus a stateless step-to-batch mapping, so a
//! resumed run sees exactly the batches an uninterrupted run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    moving_square_clip, preprocess_image, subsample_clip, Dataset, PreprocessConfig, RawFrame,
    SampleMode, SampleRef, Split, SynthSpec, VideoClip, SYNTH_SOURCE_FPS,
};
use crate::error::{Error, Result};
use crate::train::config::DataConfig;

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub val: Dataset,
}

impl TrainData {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let manifest = cfg.resolve_manifest()?;
        Ok(Self {
            train: Dataset::load(&manifest, Split::Train, cfg.preprocess)?,
            val: Dataset::load(&manifest, Split::Val, cfg.preprocess)?,
        })
    }

    /// The synthetic corpus built in memory; same clips and split as the
    /// on-disk corpus written from `spec`.
    pub fn synthetic(spec: SynthSpec, pre: PreprocessConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for i in 0..spec.count {
            let images = moving_square_clip(spec.width, spec.height, spec.frames, &mut rng);
            let raw = images
                .into_iter()
                .enumerate()
                .map(|(t, img)| RawFrame::new(img, format!("synth_{i:04}"), t))
                .collect::<Result<Vec<_>>>()?;
            let raw = subsample_clip(&raw, SYNTH_SOURCE_FPS, pre.target_fps)?;
            let frames = raw
                .iter()
                .map(|f| preprocess_image(f, pre.scale, pre.crop))
                .collect::<Result<Vec<_>>>()?;
            let split = if i % 5 == 4 { Split::Val } else { Split::Train };
            let clip = VideoClip::new(frames, pre.target_fps, split)?;
            match split {
                Split::Val => val.push(clip),
                _ => train.push(clip),
            }
        }
        Ok(Self {
            train: Dataset::from_clips(train),
            val: Dataset::from_clips(val),
        })
    }
}

/// Sample `i` of the stream lives in epoch `i / len`, whose order is the
/// dataset's shuffle under `seed + epoch`.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    mode: SampleMode,
    seed: u64,
    batch: usize,
    epoch: u64,
    order: Vec<SampleRef>,
}

impl BatchPlan {
    pub fn new(data: &Dataset, mode: SampleMode, seed: u64, batch: usize) -> Result<Self> {
        let order = data.sample_refs(mode, seed);
        if order.is_empty() {
            return Err(Error::Config(format!(
                "no training sample fits the {:?} window",
                mode
            )));
        }
        Ok(Self {
            mode,
            seed,
            batch,
            epoch: 0,
            order,
        })
    }

    pub fn mode(&self) -> SampleMode {
        self.mode
    }

    pub fn epoch_len(&self) -> usize {
        self.order.len()
    }

    pub fn refs_at(&mut self, data: &Dataset, step: u64) -> Vec<SampleRef> {
        let len = self.order.len() as u64;
        (0..self.batch as u64)
            .map(|j| {
                let i = step * self.batch as u64 + j;
                let epoch = i / len;
                if epoch != self.epoch {
                    self.order = data.sample_refs(self.mode, self.seed.wrapping_add(epoch));
                    self.epoch = epoch;
                }
                self.order[(i % len) as usize]
            })
            .collect()
    }
}
