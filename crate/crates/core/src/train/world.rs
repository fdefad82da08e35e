//! World-model fine-tuning: teacher-forced next-token cross-entropy over
//! frozen-tokenizer indices, updating only adapters and norms.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};

use crate::data::{Dataset, SampleMode, SampleRef};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::train::batches::{BatchPlan, TrainData};
use crate::train::checkpoint::{save_checkpoint, Checkpoint, CheckpointManifest};
use crate::train::config::{PredictionConfig, RunConfig, Stage};
use crate::train::log::StepLog;
use crate::train::optim::AdamW;
use crate::train::{scalar, Trainer};
use crate::vq::{IndexGrid, VqAutoencoder};
use crate::wm::{cross_entropy, frame_indices, frame_text_prompt, ByteCodec, WorldModel};

/// Tokenizer indices of every frame of every clip, computed once.
#[derive(Debug, Clone)]
pub struct TokenizedClips {
    clips: Vec<Vec<IndexGrid>>,
}

impl TokenizedClips {
    pub fn new(tok: &VqAutoencoder, data: &Dataset) -> Result<Self> {
        let clips = data
            .clips()
            .iter()
            .map(|c| {
                let mut grids = Vec::with_capacity(c.len());
                for chunk in c.frames().chunks(16) {
                    grids.extend(tok.tokenize_frames(chunk)?);
                }
                Ok(grids)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips })
    }

    pub fn window(&self, r: SampleRef, len: usize) -> Result<&[IndexGrid]> {
        self.clips
            .get(r.clip)
            .and_then(|c| c.get(r.start..r.start + len))
            .ok_or_else(|| Error::Parameter(format!("window {r:?} out of range")))
    }
}

/// Teacher-forced loss and top-1 accuracy of `model` on framed sequences.
pub fn evaluate_sequences(model: &WorldModel, prompt: &[u32], seqs: &[Vec<u32>]) -> Result<(f64, f64)> {
    let logits = model.teacher_forced_logits(prompt, seqs)?.detach();
    let (b, l, v) = logits.dims3()?;
    let flat = logits.reshape((b * l, v))?;
    let targets: Vec<u32> = seqs.concat();
    let ce = scalar(&cross_entropy(&flat, &targets)?)?;
    Ok((ce, top1(&flat, &targets)?))
}

fn top1(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let pred: Vec<u32> = logits.to_dtype(DType::F32)?.argmax(D::Minus1)?.to_vec1()?;
    let hits = pred.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / targets.len().max(1) as f64)
}

pub struct WorldModelTrainer {
    cfg: RunConfig,
    prediction: PredictionConfig,
    store: ParamStore,
    model: WorldModel,
    opt: AdamW,
    frozen: BTreeSet<String>,
    frozen_hash: String,
    prompt: Vec<u32>,
    train: TokenizedClips,
    val: TokenizedClips,
    data: TrainData,
    plan: BatchPlan,
    step: u64,
}

impl WorldModelTrainer {
    /// `tok` is the frozen tokenizer whose indices the model learns to predict.
    pub fn new(cfg: RunConfig, tok: &VqAutoencoder, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != Stage::Wm {
            return Err(Error::Config("world-model trainer needs a wm-stage config".into()));
        }
        if tok.config() != &cfg.autoencoder {
            return Err(Error::Config("tokenizer does not match the configured autoencoder".into()));
        }
        let wm_cfg = cfg.world_model.clone().expect("validated");
        let prediction = cfg.prediction.clone().expect("validated");
        let prompt = frame_text_prompt(&prediction.prompt, &ByteCodec)?;
        wm_cfg.check_fits(
            prompt.len(),
            prediction.initial_frames + prediction.predicted_frames,
            cfg.autoencoder.tokens_per_frame(),
        )?;
        let store = ParamStore::new(cfg.seed, &Device::Cpu);
        if let Some(base) = &cfg.checkpoint.base_model {
            let tensors = candle_core::safetensors::load(base, &Device::Cpu)?;
            let sorted: BTreeMap<_, _> = tensors.into_iter().collect();
            for (name, t) in sorted {
                store.insert(&name, &t)?;
            }
        }
        let model = WorldModel::new(&store, &wm_cfg)?;
        let mut trainable = Vec::new();
        let mut frozen = BTreeSet::new();
        for (name, var) in store.named() {
            if wm_cfg.is_trainable(&name) {
                trainable.push((name, var));
            } else {
                frozen.insert(name);
            }
        }
        let mode = SampleMode::Prediction {
            initial: prediction.initial_frames,
            predicted: prediction.predicted_frames,
        };
        let plan = BatchPlan::new(&data.train, mode, cfg.seed, cfg.batch_size)?;
        let mut t = Self {
            opt: AdamW::new(trainable, cfg.optimizer.clone())?,
            train: TokenizedClips::new(tok, &data.train)?,
            val: TokenizedClips::new(tok, &data.val)?,
            frozen,
            frozen_hash: String::new(),
            prediction,
            store,
            model,
            prompt,
            data,
            plan,
            step: 0,
            cfg,
        };
        t.frozen_hash = t.frozen_param_hash()?;
        Ok(t)
    }

    pub fn resume(ckpt: &Checkpoint, tok: &VqAutoencoder, data: TrainData) -> Result<Self> {
        ckpt.expect_stage(Stage::Wm)?;
        let mut t = Self::new(ckpt.config().clone(), tok, data)?;
        ckpt.restore_into(&mut t.store)?;
        ckpt.restore_optimizer("adamw", &mut t.opt)?;
        t.frozen_hash = t.frozen_param_hash()?;
        t.step = ckpt.manifest.step;
        Ok(t)
    }

    pub fn model(&self) -> &WorldModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prompt(&self) -> &[u32] {
        &self.prompt
    }

    pub fn frozen_names(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    fn window_len(&self) -> usize {
        self.prediction.initial_frames + self.prediction.predicted_frames
    }

    fn mode(&self) -> SampleMode {
        SampleMode::Prediction {
            initial: self.prediction.initial_frames,
            predicted: self.prediction.predicted_frames,
        }
    }

    /// Framed index sequences of the training batch of `step`.
    pub fn batch_at(&mut self, step: u64) -> Result<Vec<Vec<u32>>> {
        let refs = self.plan.refs_at(&self.data.train, step);
        refs.into_iter()
            .map(|r| frame_indices(self.train.window(r, self.window_len())?))
            .collect()
    }

    /// Validation sequences, at most `validation_samples` of them.
    pub fn validation_sequences(&self) -> Result<Vec<Vec<u32>>> {
        self.data
            .val
            .sample_refs(self.mode(), self.cfg.seed)
            .into_iter()
            .take(self.cfg.validation_samples.max(1))
            .map(|r| frame_indices(self.val.window(r, self.window_len())?))
            .collect()
    }

    fn frozen_param_hash(&self) -> Result<String> {
        let s = ParamStore::new(0, &Device::Cpu);
        for (n, v) in self.store.named() {
            if self.frozen.contains(&n) {
                s.insert(&n, v.as_tensor())?;
            }
        }
        s.content_hash()
    }

    /// Fails if any frozen parameter changed since construction.
    pub fn check_frozen(&self) -> Result<()> {
        if self.frozen_param_hash()? != self.frozen_hash {
            return Err(Error::Numerical {
                component: "world model".into(),
                reason: "a frozen parameter was updated".into(),
            });
        }
        Ok(())
    }
}

impl Trainer for WorldModelTrainer {
    fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn step_index(&self) -> u64 {
        self.step
    }

    fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let lr = self.cfg.schedule.lr_at(step);
        let batch = self.batch_at(step)?;
        let logits = self.model.teacher_forced_logits(&self.prompt, &batch)?;
        let (b, l, v) = logits.dims3()?;
        let flat = logits.reshape((b * l, v))?;
        let targets: Vec<u32> = batch.concat();
        let loss = cross_entropy(&flat, &targets)?;
        let ce = scalar(&loss)?;
        if !ce.is_finite() {
            return Err(Error::Numerical {
                component: "cross-entropy".into(),
                reason: format!("loss {ce}"),
            });
        }
        let acc = top1(&flat.detach(), &targets)?;
        let grads = loss.backward()?;
        for (name, var) in self.store.named() {
            if self.frozen.contains(&name) && grads.get(var.as_tensor()).is_some() {
                return Err(Error::Numerical {
                    component: "world model".into(),
                    reason: format!("frozen parameter {name} received a gradient"),
                });
            }
        }
        self.opt.step(&grads, lr)?;
        self.step += 1;
        let mut log = StepLog::new(step, lr);
        log.terms.insert("ce".into(), ce);
        log.terms.insert("acc".into(), acc);
        Ok(log)
    }

    fn validate(&mut self) -> Result<BTreeMap<String, f64>> {
        self.check_frozen()?;
        let seqs = self.validation_sequences()?;
        let mut out = BTreeMap::new();
        if seqs.is_empty() {
            return Ok(out);
        }
        let (ce, acc) = evaluate_sequences(&self.model, &self.prompt, &seqs)?;
        out.insert("val_ce".into(), ce);
        out.insert("val_acc".into(), acc);
        Ok(out)
    }

    fn save(&self, dir: &Path) -> Result<CheckpointManifest> {
        self.check_frozen()?;
        save_checkpoint(dir, &self.cfg, self.step, &self.store, &[("adamw", &self.opt)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::testutil::{tiny_autoencoder, tiny_config, tiny_data};

    fn tokenizer() -> VqAutoencoder {
        let store = ParamStore::new(11, &Device::Cpu);
        VqAutoencoder::new(&store, &tiny_autoencoder()).unwrap()
    }

    #[test]
    fn only_adapters_and_norms_move() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Stage::Wm, dir.path());
        let tok = tokenizer();
        let mut t = WorldModelTrainer::new(cfg.clone(), &tok, tiny_data()).unwrap();
        let wm = cfg.world_model.as_ref().unwrap();
        for name in t.store().named().keys() {
            assert_eq!(t.frozen_names().contains(name), !wm.is_trainable(name), "{name}");
        }
        assert!(t.frozen_names().iter().any(|n| n.starts_with("head")));
        let before = t.store().snapshot().unwrap();
        for _ in 0..3 {
            let log = t.train_step().unwrap();
            assert!(log.term("ce").unwrap().is_finite());
        }
        t.check_frozen().unwrap();
        let after = t.store().snapshot().unwrap();
        let mut moved = 0;
        for (name, b) in &before {
            let same = b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
                == after[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            if t.frozen_names().contains(name) {
                assert!(same, "{name} moved");
            } else if !same {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn frozen_drift_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Stage::Wm, dir.path());
        let t = WorldModelTrainer::new(cfg, &tokenizer(), tiny_data()).unwrap();
        let name = t.frozen_names().iter().next().unwrap().clone();
        let var = t.store().get(&name).unwrap();
        var.set(&(var.as_tensor() + 1.0).unwrap()).unwrap();
        assert!(matches!(t.check_frozen(), Err(Error::Numerical { .. })));
    }

    #[test]
    fn resume_gives_bit_identical_next_step() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Stage::Wm, dir.path());
        let tok = tokenizer();
        let mut a = WorldModelTrainer::new(cfg, &tok, tiny_data()).unwrap();
        for _ in 0..2 {
            a.train_step().unwrap();
        }
        a.save(&dir.path().join("ck")).unwrap();
        let ck = Checkpoint::open(&dir.path().join("ck")).unwrap();
        let mut b = WorldModelTrainer::resume(&ck, &tok, tiny_data()).unwrap();
        assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
    }

    #[test]
    fn sequences_are_framed_windows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Stage::Wm, dir.path());
        let mut t = WorldModelTrainer::new(cfg, &tokenizer(), tiny_data()).unwrap();
        let batch = t.batch_at(0).unwrap();
        assert_eq!(batch.len(), 2);
        for seq in &batch {
            assert_eq!(seq.len(), 3 * 17);
            for (i, tok) in seq.iter().enumerate() {
                assert_eq!(*tok == 0, i % 17 == 16);
            }
        }
        let (ce, acc) = evaluate_sequences(t.model(), t.prompt(), &t.validation_sequences().unwrap()).unwrap();
        assert!(ce > 0.0 && (0.0..=1.0).contains(&acc));
    }
}
