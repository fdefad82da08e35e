//! Training harness: schedules, AdamW, run configuration, checkpoints and the
//! three fine-tuning stages.

pub mod batches;
pub mod checkpoint;
pub mod config;
pub mod log;
pub mod optim;
pub mod schedule;
pub mod tokenizer;
pub mod video;
pub mod world;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::vq::VqAutoencoder;

pub use batches::{BatchPlan, TrainData};
pub use checkpoint::{save_checkpoint, Checkpoint, CheckpointManifest};
pub use config::{CheckpointConfig, DataConfig, FeatureConfig, PredictionConfig, Preset, RunConfig, Stage};
pub use log::{append_log, gate_step, parse_log, StepLog, GENERATOR_TERM};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::ScheduleConfig;
pub use tokenizer::TokenizerTrainer;
pub use video::VideoDecoderTrainer;
pub use world::{evaluate_sequences, TokenizedClips, WorldModelTrainer};

pub const TRAIN_LOG: &str = "train_log.txt";
pub const VAL_LOG: &str = "val_log.txt";
pub const FINAL_DIR: &str = "final";
pub const LAST_GOOD_DIR: &str = "last-good";

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One training stage, stepped one batch at a time.
pub trait Trainer {
    fn config(&self) -> &RunConfig;
    /// Number of completed steps.
    fn step_index(&self) -> u64;
    fn train_step(&mut self) -> Result<StepLog>;
    fn validate(&mut self) -> Result<BTreeMap<String, f64>>;
    fn save(&self, dir: &Path) -> Result<CheckpointManifest>;
}

/// Steps until `total_steps`, logging every step, validating and
/// checkpointing at the configured intervals, and saving `final`. A numerical
/// failure saves the untouched pre-step state to `last-good` and aborts.
pub fn run(trainer: &mut impl Trainer) -> Result<CheckpointManifest> {
    let cfg = trainer.config().clone();
    let dir = cfg.checkpoint.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.save(&dir.join("config.toml"))?;
    let total = cfg.schedule.total_steps;
    while trainer.step_index() < total {
        let log = match trainer.train_step() {
            Ok(l) => l,
            Err(e @ Error::Numerical { .. }) => {
                ::log::error!("step {}: {e}; saving last good state", trainer.step_index());
                if let Err(save_err) = trainer.save(&dir.join(LAST_GOOD_DIR)) {
                    ::log::error!("could not save last good state: {save_err}");
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if log.step % 50 == 0 {
            ::log::info!("{}", log.to_line());
        }
        append_log(&dir.join(TRAIN_LOG), std::slice::from_ref(&log))?;
        let s = trainer.step_index();
        if cfg.validate_every > 0 && s % cfg.validate_every == 0 {
            let mut v = StepLog::new(s, cfg.schedule.lr_at(s));
            v.terms = trainer.validate()?;
            ::log::info!("validation {}", v.to_line());
            append_log(&dir.join(VAL_LOG), &[v])?;
        }
        if cfg.checkpoint.every > 0 && s % cfg.checkpoint.every == 0 && s < total {
            trainer.save(&dir.join(format!("step-{s:08}")))?;
        }
    }
    trainer.save(&dir.join(FINAL_DIR))
}

/// Loads the tokenizer checkpoint named by `cfg.checkpoint.tokenizer` and
/// checks it matches the configured autoencoder.
pub fn load_tokenizer_for(cfg: &RunConfig) -> Result<(crate::params::ParamStore, VqAutoencoder)> {
    let path = cfg
        .checkpoint
        .tokenizer
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint.tokenizer is not set".into()))?;
    load_tokenizer(path, Some(cfg))
}

pub fn load_tokenizer(dir: &Path, expect: Option<&RunConfig>) -> Result<(crate::params::ParamStore, VqAutoencoder)> {
    let ck = Checkpoint::open(dir)?;
    ck.expect_stage(Stage::Tok)?;
    if let Some(cfg) = expect {
        if ck.config().autoencoder_hash()? != cfg.autoencoder_hash()? {
            return Err(Error::Config(format!(
                "tokenizer checkpoint {} was trained with a different autoencoder config",
                dir.display()
            )));
        }
    }
    let store = ck.load_store(&Device::Cpu)?;
    let model = VqAutoencoder::new(&store, &ck.config().autoencoder)?;
    Ok((store, model))
}

pub fn train_tokenizer(cfg: &RunConfig, resume: Option<&Path>) -> Result<CheckpointManifest> {
    let data = TrainData::load(&cfg.data)?;
    let mut t = match resume {
        Some(d) => TokenizerTrainer::resume(&Checkpoint::open(d)?, data)?,
        None => TokenizerTrainer::new(cfg.clone(), data)?,
    };
    run(&mut t)
}

pub fn train_world_model(cfg: &RunConfig, resume: Option<&Path>) -> Result<CheckpointManifest> {
    let data = TrainData::load(&cfg.data)?;
    let (_, tok) = load_tokenizer_for(cfg)?;
    let mut t = match resume {
        Some(d) => WorldModelTrainer::resume(&Checkpoint::open(d)?, &tok, data)?,
        None => WorldModelTrainer::new(cfg.clone(), &tok, data)?,
    };
    run(&mut t)
}

pub fn train_video_decoder(cfg: &RunConfig, resume: Option<&Path>) -> Result<CheckpointManifest> {
    let data = TrainData::load(&cfg.data)?;
    let (tok_store, _) = load_tokenizer_for(cfg)?;
    let mut t = match resume {
        Some(d) => VideoDecoderTrainer::resume(&Checkpoint::open(d)?, tok_store, data)?,
        None => VideoDecoderTrainer::new(cfg.clone(), tok_store, data)?,
    };
    run(&mut t)
}
