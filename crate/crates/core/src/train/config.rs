//! Run configuration: one TOML file per training stage.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetManifest, PreprocessConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, RandomConvFeatures, RandomPatchTeacher};
use crate::train::optim::AdamWConfig;
use crate::train::schedule::ScheduleConfig;
use crate::vdec::InflationSpec;
use crate::vq::AutoencoderConfig;
use crate::wm::{WorldModelConfig, DEFAULT_PROMPT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Tok,
    Wm,
    Vdec,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Tok => "tok",
            Stage::Wm => "wm",
            Stage::Vdec => "vdec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    PaperScale,
    DeskScale,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-scale" => Ok(Preset::PaperScale),
            "desk-scale" => Ok(Preset::DeskScale),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset manifest; when absent the synthetic corpus below is used.
    pub manifest: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    /// Where the synthetic corpus is written.
    pub synth_dir: Option<PathBuf>,
    pub preprocess: PreprocessConfig,
}

impl DataConfig {
    /// The manifest to load, writing the synthetic corpus first if needed.
    pub fn resolve_manifest(&self) -> Result<DatasetManifest> {
        if let Some(m) = &self.manifest {
            return DatasetManifest::load(m);
        }
        let (Some(spec), Some(dir)) = (self.synth, &self.synth_dir) else {
            return Err(Error::Config("data needs a manifest or a synth spec with synth_dir".into()));
        };
        let path = dir.join("manifest.tsv");
        if path.exists() {
            return DatasetManifest::load(&path);
        }
        crate::data::write_synthetic_corpus(dir, spec)
    }
}

/// Fixed feature networks behind the perceptual and distillation losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub perceptual_widths: Vec<usize>,
    pub perceptual_seed: u64,
    pub teacher_dim: usize,
    pub teacher_seed: u64,
}

impl FeatureConfig {
    pub fn perceptual(&self) -> Result<RandomConvFeatures> {
        RandomConvFeatures::new(self.perceptual_seed, &self.perceptual_widths)
    }

    pub fn teacher(&self, ae: &AutoencoderConfig) -> Result<RandomPatchTeacher> {
        RandomPatchTeacher::new(self.teacher_seed, ae.compression_factor, self.teacher_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub initial_frames: usize,
    pub predicted_frames: usize,
    pub prompt: String,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            initial_frames: 2,
            predicted_frames: 14,
            prompt: DEFAULT_PROMPT.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    /// Output directory for checkpoints and logs.
    pub dir: PathBuf,
    /// Save every this many steps; 0 saves only at the end.
    pub every: u64,
    /// Trained tokenizer checkpoint (world model and video decoder stages).
    pub tokenizer: Option<PathBuf>,
    /// Safetensors file holding pretrained frozen world-model weights.
    pub base_model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub batch_size: usize,
    /// Validation metrics every this many steps; 0 disables them.
    pub validate_every: u64,
    pub validation_samples: usize,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub data: DataConfig,
    pub checkpoint: CheckpointConfig,
    pub autoencoder: AutoencoderConfig,
    pub features: Option<FeatureConfig>,
    pub loss: Option<LossWeights>,
    pub world_model: Option<WorldModelConfig>,
    pub prediction: Option<PredictionConfig>,
    pub inflation: Option<InflationSpec>,
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

impl RunConfig {
    pub fn preset(preset: Preset, stage: Stage) -> Self {
        let desk = preset == Preset::DeskScale;
        let autoencoder = if desk {
            AutoencoderConfig::desk_scale()
        } else {
            AutoencoderConfig::paper_scale()
        };
        let data = if desk {
            DataConfig {
                manifest: None,
                synth: Some(SynthSpec {
                    count: 10,
                    width: 128,
                    height: 128,
                    frames: 40,
                    seed: 7,
                }),
                synth_dir: Some(PathBuf::from("runs/synth")),
                preprocess: PreprocessConfig {
                    scale: 0.5,
                    crop: 64,
                    target_fps: 4.0,
                },
            }
        } else {
            DataConfig {
                manifest: Some(PathBuf::from("data/manifest.tsv")),
                synth: None,
                synth_dir: None,
                preprocess: PreprocessConfig::default(),
            }
        };
        let features = if desk {
            FeatureConfig {
                perceptual_widths: vec![8, 16, 32],
                perceptual_seed: 0x5eed,
                teacher_dim: 32,
                teacher_seed: 0x7eac,
            }
        } else {
            FeatureConfig {
                perceptual_widths: vec![64, 128, 256, 512, 512],
                perceptual_seed: 0x5eed,
                teacher_dim: 384,
                teacher_seed: 0x7eac,
            }
        };
        let (batch_size, schedule, optimizer) = match (stage, desk) {
            (Stage::Tok, false) => (80, ScheduleConfig::tokenizer(), AdamWConfig::standard()),
            (Stage::Wm, false) => (24, ScheduleConfig::world_model(), AdamWConfig::llama2()),
            (Stage::Vdec, false) => (48, ScheduleConfig::video_decoder(), AdamWConfig::standard()),
            (Stage::Tok, true) => (
                8,
                ScheduleConfig {
                    warmup_steps: 20,
                    peak_lr: 2e-3,
                    decay_steps: 1_500,
                    final_lr: 2e-5,
                    total_steps: 2_000,
                },
                AdamWConfig::standard(),
            ),
            (Stage::Wm, true) => (
                4,
                ScheduleConfig {
                    warmup_steps: 20,
                    peak_lr: 3e-3,
                    decay_steps: 800,
                    final_lr: 3e-4,
                    total_steps: 1_000,
                },
                AdamWConfig::llama2(),
            ),
            (Stage::Vdec, true) => (
                2,
                ScheduleConfig {
                    warmup_steps: 10,
                    peak_lr: 1e-3,
                    decay_steps: 190,
                    final_lr: 1e-5,
                    total_steps: 200,
                },
                AdamWConfig::standard(),
            ),
        };
        let loss = match stage {
            Stage::Tok => Some(LossWeights {
                adversarial_start_step: if desk { 1_000 } else { 20_000 },
                ..LossWeights::proposed()
            }),
            Stage::Vdec => Some(LossWeights {
                adversarial_start_step: if desk { 100 } else { 2_000 },
                ..LossWeights::proposed()
            }),
            Stage::Wm => None,
        };
        let world_model = (stage == Stage::Wm).then(|| {
            let mut wm = if desk {
                WorldModelConfig::desk_scale()
            } else {
                WorldModelConfig::paper_scale()
            };
            wm.image_vocab = autoencoder.codebook_size + 1;
            wm
        });
        let root = PathBuf::from("runs").join(stage.name());
        Self {
            stage,
            seed: 0,
            batch_size,
            validate_every: if desk { 250 } else { 5_000 },
            validation_samples: if desk { 8 } else { 256 },
            schedule,
            optimizer,
            data,
            checkpoint: CheckpointConfig {
                dir: root,
                every: if desk { 500 } else { 5_000 },
                tokenizer: (stage != Stage::Tok).then(|| PathBuf::from("runs/tok/final")),
                base_model: None,
            },
            features: (stage != Stage::Wm).then_some(features),
            loss,
            world_model,
            prediction: (stage == Stage::Wm).then(PredictionConfig::default),
            inflation: (stage == Stage::Vdec).then(InflationSpec::default),
            autoencoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("stage {} {what}", self.stage.name())))
            }
        };
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.autoencoder.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        match self.stage {
            Stage::Tok => {
                need(self.loss.is_some() && self.features.is_some(), "needs [loss] and [features]")?;
                need(self.world_model.is_none() && self.prediction.is_none(), "takes no world-model block")?;
                need(self.inflation.is_none(), "takes no [inflation] block")?;
            }
            Stage::Wm => {
                need(self.world_model.is_some() && self.prediction.is_some(), "needs [world_model] and [prediction]")?;
                need(self.loss.is_none() && self.inflation.is_none(), "takes no [loss] or [inflation] block")?;
                need(self.checkpoint.tokenizer.is_some(), "needs checkpoint.tokenizer")?;
            }
            Stage::Vdec => {
                need(self.loss.is_some() && self.features.is_some(), "needs [loss] and [features]")?;
                need(self.inflation.is_some(), "needs [inflation]")?;
                need(self.world_model.is_none() && self.prediction.is_none(), "takes no world-model block")?;
                need(self.checkpoint.tokenizer.is_some(), "needs checkpoint.tokenizer")?;
            }
        }
        if let Some(w) = &self.loss {
            w.validate()?;
        }
        if let Some(s) = &self.inflation {
            s.validate()?;
        }
        if let Some(wm) = &self.world_model {
            wm.validate()?;
            if wm.image_vocab != self.autoencoder.codebook_size + 1 {
                return Err(Error::Config(format!(
                    "world model image vocabulary {} must equal codebook size {} + 1",
                    wm.image_vocab, self.autoencoder.codebook_size
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Hash of the whole configuration.
    pub fn config_hash(&self) -> Result<String> {
        Ok(short_hash(self.to_toml()?.as_bytes()))
    }

    /// Hash of the parts that fix the parameter layout of this stage's model.
    pub fn model_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Model<'a> {
            autoencoder: &'a AutoencoderConfig,
            world_model: Option<&'a WorldModelConfig>,
            inflation: Option<&'a InflationSpec>,
        }
        let m = Model {
            autoencoder: &self.autoencoder,
            world_model: self.world_model.as_ref(),
            inflation: self.inflation.as_ref(),
        };
        let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
        Ok(short_hash(text.as_bytes()))
    }

    pub fn autoencoder_hash(&self) -> Result<String> {
        let text = toml::to_string(&self.autoencoder).map_err(|e| Error::Config(e.to_string()))?;
        Ok(short_hash(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for preset in [Preset::PaperScale, Preset::DeskScale] {
            for stage in [Stage::Tok, Stage::Wm, Stage::Vdec] {
                let cfg = RunConfig::preset(preset, stage);
                cfg.validate().unwrap();
                let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
                assert_eq!(back, cfg);
                assert_eq!(back.config_hash().unwrap(), cfg.config_hash().unwrap());
            }
        }
    }

    #[test]
    fn full_size_training_presets() {
        let tok = RunConfig::preset(Preset::PaperScale, Stage::Tok);
        assert_eq!((tok.batch_size, tok.schedule.total_steps), (80, 200_000));
        assert_eq!(tok.loss.unwrap().adversarial_start_step, 20_000);
        let wm = RunConfig::preset(Preset::PaperScale, Stage::Wm);
        assert_eq!((wm.batch_size, wm.schedule.total_steps), (24, 28_300));
        let vd = RunConfig::preset(Preset::PaperScale, Stage::Vdec);
        assert_eq!((vd.batch_size, vd.schedule.total_steps), (48, 100_000));
        assert_eq!(vd.loss.unwrap().adversarial_start_step, 2_000);
    }

    #[test]
    fn stage_field_presence() {
        let mut tok = RunConfig::preset(Preset::DeskScale, Stage::Tok);
        tok.world_model = Some(WorldModelConfig::desk_scale());
        assert!(matches!(tok.validate(), Err(Error::Config(_))));
        let mut wm = RunConfig::preset(Preset::DeskScale, Stage::Wm);
        wm.world_model = None;
        assert!(wm.validate().is_err());
        let mut wm = RunConfig::preset(Preset::DeskScale, Stage::Wm);
        wm.world_model.as_mut().unwrap().image_vocab = 99;
        assert!(wm.validate().is_err());
        let mut vd = RunConfig::preset(Preset::DeskScale, Stage::Vdec);
        vd.inflation = Some(InflationSpec { extent: 2 });
        assert!(vd.validate().is_err());
    }

    #[test]
    fn model_hash_ignores_training_knobs() {
        let a = RunConfig::preset(Preset::DeskScale, Stage::Tok);
        let mut b = a.clone();
        b.seed = 99;
        b.schedule.peak_lr = 1e-4;
        assert_eq!(a.model_hash().unwrap(), b.model_hash().unwrap());
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.autoencoder.codebook_size = 32;
        assert_ne!(a.model_hash().unwrap(), b.model_hash().unwrap());
    }

    #[test]
    fn bad_toml_is_a_config_error() {
        assert!(matches!(RunConfig::from_toml("stage = 'tok'"), Err(Error::Config(_))));
        assert!("huge".parse::<Preset>().is_err());
    }
}
