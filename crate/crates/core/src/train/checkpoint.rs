//! Checkpoint directories: `params.safetensors`, one safetensors file per
//! optimizer and a `manifest.toml` recording the run configuration, the step
//! and content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::train::config::{RunConfig, Stage};
use crate::train::optim::AdamW;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: Stage,
    pub step: u64,
    pub config_hash: String,
    pub model_hash: String,
    /// Hash over parameter names, shapes and values.
    pub content_hash: String,
    /// Hash of the parameter file bytes.
    pub file_hash: String,
    pub optimizers: Vec<String>,
    pub config: RunConfig,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn optimizer_file(name: &str) -> String {
    format!("optim.{name}.safetensors")
}

pub fn save_checkpoint(
    dir: &Path,
    cfg: &RunConfig,
    step: u64,
    store: &ParamStore,
    optimizers: &[(&str, &AdamW)],
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = dir.join(PARAMS_FILE);
    store.save(&params)?;
    for (name, opt) in optimizers {
        opt.save(&dir.join(optimizer_file(name)))?;
    }
    let manifest = CheckpointManifest {
        stage: cfg.stage,
        step,
        config_hash: cfg.config_hash()?,
        model_hash: cfg.model_hash()?,
        content_hash: store.content_hash()?,
        file_hash: file_hash(&params)?,
        optimizers: optimizers.iter().map(|(n, _)| n.to_string()).collect(),
        config: cfg.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

/// A checkpoint on disk with its manifest read and the parameter file verified.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
}

impl Checkpoint {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let actual = file_hash(&dir.join(PARAMS_FILE))?;
        if actual != manifest.file_hash {
            return Err(Error::Config(format!(
                "checkpoint {} is corrupt: parameter file hash {actual} != {}",
                dir.display(),
                manifest.file_hash
            )));
        }
        if manifest.config.model_hash()? != manifest.model_hash {
            return Err(Error::Config(format!(
                "checkpoint {} manifest disagrees with its own model config",
                dir.display()
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<&Self> {
        if self.manifest.stage != stage {
            return Err(Error::Config(format!(
                "checkpoint {} is a {} checkpoint, expected {}",
                self.dir.display(),
                self.manifest.stage.name(),
                stage.name()
            )));
        }
        Ok(self)
    }

    /// Fails unless `cfg` builds the same model as the one saved.
    pub fn expect_model(&self, cfg: &RunConfig) -> Result<&Self> {
        let want = cfg.model_hash()?;
        if want != self.manifest.model_hash {
            return Err(Error::Config(format!(
                "checkpoint {} holds model {} but the config describes model {want}",
                self.dir.display(),
                self.manifest.model_hash
            )));
        }
        Ok(self)
    }

    /// Every saved tensor, inserted into a fresh store.
    pub fn load_store(&self, device: &candle_core::Device) -> Result<ParamStore> {
        let store = ParamStore::new(0, device);
        let tensors = candle_core::safetensors::load(self.dir.join(PARAMS_FILE), device)?;
        let sorted: BTreeMap<_, _> = tensors.into_iter().collect();
        for (name, t) in sorted {
            store.insert(&name, &t)?;
        }
        Ok(store)
    }

    /// Overwrites the registered parameters of `store` and checks that the
    /// result is exactly what was saved.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        store.load(&self.dir.join(PARAMS_FILE))?;
        let got = store.content_hash()?;
        if got != self.manifest.content_hash {
            return Err(Error::Config(format!(
                "restored parameters hash to {got}, checkpoint recorded {}",
                self.manifest.content_hash
            )));
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, name: &str, opt: &mut AdamW) -> Result<()> {
        if !self.manifest.optimizers.iter().any(|n| n == name) {
            return Err(Error::Config(format!("checkpoint has no optimizer {name}")));
        }
        opt.load(&self.dir.join(optimizer_file(name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::train::config::Preset;
    use candle_core::Device;

    fn store(seed: u64) -> ParamStore {
        let s = ParamStore::new(seed, &Device::Cpu);
        s.get_or_init("a.weight", &[3, 2], Init::Normal(1.0)).unwrap();
        s.get_or_init("b.bias", &[4], Init::Normal(1.0)).unwrap();
        s
    }

    #[test]
    fn round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::preset(Preset::DeskScale, Stage::Tok);
        let src = store(1);
        let m = save_checkpoint(dir.path(), &cfg, 42, &src, &[]).unwrap();
        let ck = Checkpoint::open(dir.path()).unwrap();
        assert_eq!(ck.manifest, m);
        assert_eq!(ck.manifest.step, 42);
        let mut dst = store(2);
        ck.restore_into(&mut dst).unwrap();
        assert_eq!(dst.content_hash().unwrap(), src.content_hash().unwrap());
        assert_eq!(ck.load_store(&Device::Cpu).unwrap().content_hash().unwrap(), m.content_hash);

        ck.expect_stage(Stage::Tok).unwrap();
        assert!(ck.expect_stage(Stage::Wm).is_err());
        let mut other = cfg.clone();
        other.autoencoder.codebook_size = 64;
        assert!(matches!(ck.expect_model(&other), Err(Error::Config(_))));
        let mut reseeded = cfg.clone();
        reseeded.seed = 5;
        ck.expect_model(&reseeded).unwrap();
    }

    #[test]
    fn corrupt_parameters_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::preset(Preset::DeskScale, Stage::Tok);
        save_checkpoint(dir.path(), &cfg, 1, &store(1), &[]).unwrap();
        store(9).save(&dir.path().join(PARAMS_FILE)).unwrap();
        assert!(matches!(Checkpoint::open(dir.path()), Err(Error::Config(_))));
    }
}
