//! Inference over the three trained stages: tokenize the initial frames,
//! extend them with the world model, decode with the video decoder. Also the
//! evaluation runs and the ablation sweeps built on top.

pub mod evaluate;
pub mod generate;
pub mod sweep;

use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::train::{Checkpoint, PredictionConfig, RunConfig, Stage};
use crate::vdec::VideoDecoder;
use crate::vq::VqAutoencoder;
use crate::wm::WorldModel;

pub use evaluate::{evaluate_generation, evaluate_transcoding, fitted_ssim, GenerationEval};
pub use generate::{generate_video, load_input_frames, GenerateRequest, Generated, GenerationRun, RunManifest, RUN_MANIFEST};
pub use sweep::{run_sweep, top_k_sweep, loss_toggle_sweep, validation_clips, validation_frames, SweepAxis, SweepOutcome, LOSS_TOGGLE_VARIANTS, TOP_K_SWEEP};

/// Identity of a loaded checkpoint, as recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub dir: PathBuf,
    pub stage: Stage,
    pub step: u64,
    pub config_hash: String,
    pub content_hash: String,
}

impl CheckpointInfo {
    fn of(ck: &Checkpoint) -> Self {
        Self {
            dir: ck.dir.clone(),
            stage: ck.manifest.stage,
            step: ck.manifest.step,
            config_hash: ck.manifest.config_hash.clone(),
            content_hash: ck.manifest.content_hash.clone(),
        }
    }
}

fn codebook_hash(store: &ParamStore) -> Result<String> {
    let s = ParamStore::new(0, &Device::Cpu);
    for (n, v) in store.named() {
        if n.starts_with("codebook.") {
            s.insert(&n, v.as_tensor())?;
        }
    }
    s.content_hash()
}

/// Tokenizer, world model and video decoder, checked to agree on the
/// autoencoder configuration and codebook.
pub struct Pipeline {
    tok_cfg: RunConfig,
    wm_cfg: RunConfig,
    tokenizer: VqAutoencoder,
    world_model: WorldModel,
    video_decoder: VideoDecoder,
    checkpoints: [CheckpointInfo; 3],
}

impl Pipeline {
    pub fn load(tok_dir: &Path, wm_dir: &Path, vdec_dir: &Path) -> Result<Self> {
        let dev = Device::Cpu;
        let tok_ck = Checkpoint::open(tok_dir)?;
        tok_ck.expect_stage(Stage::Tok)?;
        let wm_ck = Checkpoint::open(wm_dir)?;
        wm_ck.expect_stage(Stage::Wm)?;
        let vdec_ck = Checkpoint::open(vdec_dir)?;
        vdec_ck.expect_stage(Stage::Vdec)?;
        let ae_hash = tok_ck.config().autoencoder_hash()?;
        for ck in [&wm_ck, &vdec_ck] {
            if ck.config().autoencoder_hash()? != ae_hash {
                return Err(Error::Config(format!(
                    "{} was trained against a different autoencoder than {}",
                    ck.dir.display(),
                    tok_dir.display()
                )));
            }
        }

        let tok_store = tok_ck.load_store(&dev)?;
        let tokenizer = VqAutoencoder::new(&tok_store, &tok_ck.config().autoencoder)?;
        let wm_cfg = wm_ck.config().world_model.clone().expect("validated");
        let world_model = WorldModel::new(&wm_ck.load_store(&dev)?, &wm_cfg)?;
        let vdec_store = vdec_ck.load_store(&dev)?;
        if codebook_hash(&vdec_store)? != codebook_hash(&tok_store)? {
            return Err(Error::Config(format!(
                "video decoder {} carries a different codebook than tokenizer {}",
                vdec_dir.display(),
                tok_dir.display()
            )));
        }
        let spec = vdec_ck.config().inflation.expect("validated");
        let video_decoder = VideoDecoder::new(&vdec_store, &vdec_ck.config().autoencoder, spec)?;
        Ok(Self {
            checkpoints: [CheckpointInfo::of(&tok_ck), CheckpointInfo::of(&wm_ck), CheckpointInfo::of(&vdec_ck)],
            tok_cfg: tok_ck.config().clone(),
            wm_cfg: wm_ck.config().clone(),
            tokenizer,
            world_model,
            video_decoder,
        })
    }

    pub fn tokenizer(&self) -> &VqAutoencoder {
        &self.tokenizer
    }

    pub fn world_model(&self) -> &WorldModel {
        &self.world_model
    }

    pub fn video_decoder(&self) -> &VideoDecoder {
        &self.video_decoder
    }

    pub fn tokenizer_config(&self) -> &RunConfig {
        &self.tok_cfg
    }

    pub fn world_model_config(&self) -> &RunConfig {
        &self.wm_cfg
    }

    /// Initial/predicted frame counts and prompt the world model was trained on.
    pub fn prediction(&self) -> &PredictionConfig {
        self.wm_cfg.prediction.as_ref().expect("validated")
    }

    /// Tokenizer, world model, video decoder.
    pub fn checkpoints(&self) -> &[CheckpointInfo; 3] {
        &self.checkpoints
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::path::Path;

    use crate::train::testutil::{tiny_config, tiny_data};
    use crate::train::{run, Stage, TokenizerTrainer, VideoDecoderTrainer, WorldModelTrainer};
    use crate::train::{load_tokenizer, Trainer};

    /// Trains tiny tok, wm and vdec checkpoints under `root` for a few steps.
    pub fn tiny_checkpoints(root: &Path) {
        let data = tiny_data();
        let tok_cfg = tiny_config(Stage::Tok, &root.join("tok"));
        run(&mut TokenizerTrainer::new(tok_cfg, data.clone()).unwrap()).unwrap();
        let tok_dir = root.join("tok/final");
        let (tok_store, tok) = load_tokenizer(&tok_dir, None).unwrap();

        let mut wm_cfg = tiny_config(Stage::Wm, &root.join("wm"));
        wm_cfg.checkpoint.tokenizer = Some(tok_dir.clone());
        wm_cfg.schedule.total_steps = 4;
        let mut wm = WorldModelTrainer::new(wm_cfg, &tok, data.clone()).unwrap();
        run(&mut wm).unwrap();
        assert_eq!(wm.step_index(), 4);

        let mut vd_cfg = tiny_config(Stage::Vdec, &root.join("vdec"));
        vd_cfg.checkpoint.tokenizer = Some(tok_dir);
        vd_cfg.schedule.total_steps = 4;
        run(&mut VideoDecoderTrainer::new(vd_cfg, tok_store, data).unwrap()).unwrap();
    }

    pub fn dirs(root: &Path) -> [std::path::PathBuf; 3] {
        ["tok", "wm", "vdec"].map(|s| root.join(s).join("final"))
    }
}
