//! Video-decoder fine-tuning over 3-frame windows with the tokenizer frozen
//! and a 3D discriminator alternating with the decoder.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::data::{Frame, SampleMode, SampleRef};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, generator_loss, l1_loss, FeatureNet, LossWeights, RandomConvFeatures,
};
use crate::params::ParamStore;
use crate::train::batches::{BatchPlan, TrainData};
use crate::train::checkpoint::{save_checkpoint, Checkpoint, CheckpointManifest};
use crate::train::config::{RunConfig, Stage};
use crate::train::log::{StepLog, GENERATOR_TERM};
use crate::train::optim::AdamW;
use crate::train::tokenizer::DISC_PREFIX;
use crate::train::{scalar, Trainer};
use crate::vdec::{
    discriminator_3d, inflate_discriminator, vdec_loss, TemporalWindow, VideoDecoder, WINDOW,
};
use crate::vq::{PatchDiscriminator, VqAutoencoder};

const WINDOW_MODE: SampleMode = SampleMode::Video3 { stride: 1 };

pub struct VideoDecoderTrainer {
    cfg: RunConfig,
    weights: LossWeights,
    tok_store: ParamStore,
    tok: VqAutoencoder,
    tok_hash: String,
    store: ParamStore,
    vdec: VideoDecoder,
    disc: PatchDiscriminator,
    phi: RandomConvFeatures,
    gen_opt: AdamW,
    disc_opt: AdamW,
    data: TrainData,
    plan: BatchPlan,
    step: u64,
}

impl VideoDecoderTrainer {
    /// `tok_store` holds a trained tokenizer checkpoint (autoencoder and 2D
    /// discriminator); the decoder and discriminator are inflated from it.
    pub fn new(cfg: RunConfig, tok_store: ParamStore, data: TrainData) -> Result<Self> {
        Self::build(cfg, tok_store, data, true)
    }

    fn build(cfg: RunConfig, tok_store: ParamStore, data: TrainData, inflate: bool) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != Stage::Vdec {
            return Err(Error::Config("video-decoder trainer needs a vdec-stage config".into()));
        }
        let weights = cfg.loss.expect("validated");
        let spec = cfg.inflation.expect("validated");
        let features = cfg.features.clone().expect("validated");
        let tok = VqAutoencoder::new(&tok_store, &cfg.autoencoder)?;
        let store = ParamStore::new(cfg.seed, &Device::Cpu);
        let (vdec, disc) = if inflate {
            (
                VideoDecoder::inflate(&tok_store, &store, &cfg.autoencoder, spec)?,
                inflate_discriminator(&tok_store, "disc", &store, "disc", &cfg.autoencoder, spec)?,
            )
        } else {
            (
                VideoDecoder::new(&store, &cfg.autoencoder, spec)?,
                discriminator_3d(&store, "disc", &cfg.autoencoder, spec)?,
            )
        };
        let named = store.named();
        let pick = |keep: &dyn Fn(&str) -> bool| {
            named
                .iter()
                .filter(|(n, _)| keep(n))
                .map(|(n, v)| (n.clone(), v.clone()))
                .collect::<Vec<_>>()
        };
        let gen_params = pick(&VideoDecoder::is_trainable);
        let disc_params = pick(&|n: &str| n.starts_with(DISC_PREFIX));
        let plan = BatchPlan::new(&data.train, WINDOW_MODE, cfg.seed, cfg.batch_size)?;
        Ok(Self {
            weights,
            tok_hash: tok_store.content_hash()?,
            gen_opt: AdamW::new(gen_params, cfg.optimizer.clone())?,
            disc_opt: AdamW::new(disc_params, cfg.optimizer.clone())?,
            phi: features.perceptual()?,
            tok_store,
            tok,
            store,
            vdec,
            disc,
            data,
            plan,
            step: 0,
            cfg,
        })
    }

    pub fn resume(ckpt: &Checkpoint, tok_store: ParamStore, data: TrainData) -> Result<Self> {
        ckpt.expect_stage(Stage::Vdec)?;
        let mut t = Self::build(ckpt.config().clone(), tok_store, data, false)?;
        ckpt.restore_into(&mut t.store)?;
        ckpt.restore_optimizer("gen", &mut t.gen_opt)?;
        ckpt.restore_optimizer("disc", &mut t.disc_opt)?;
        t.step = ckpt.manifest.step;
        Ok(t)
    }

    pub fn decoder(&self) -> &VideoDecoder {
        &self.vdec
    }

    pub fn tokenizer(&self) -> &VqAutoencoder {
        &self.tok
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn discriminator_hash(&self) -> Result<String> {
        let s = ParamStore::new(0, &Device::Cpu);
        for (n, v) in self.store.named() {
            if n.starts_with(DISC_PREFIX) {
                s.insert(&n, v.as_tensor())?;
            }
        }
        s.content_hash()
    }

    /// Fails if the frozen tokenizer changed.
    pub fn check_tokenizer(&self) -> Result<()> {
        if self.tok_store.content_hash()? != self.tok_hash {
            return Err(Error::Numerical {
                component: "tokenizer".into(),
                reason: "frozen tokenizer parameters drifted".into(),
            });
        }
        Ok(())
    }

    /// Folded ground truth `[B*3, 3, H, W]` and the tokenized windows.
    pub fn windows(&self, frames: &[Vec<Frame>]) -> Result<(Tensor, Vec<TemporalWindow>)> {
        let flat: Vec<Frame> = frames.iter().flatten().cloned().collect();
        let grids = self.tok.tokenize_frames(&flat)?;
        let windows = grids
            .chunks_exact(WINDOW)
            .map(|c| TemporalWindow::new(c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((Frame::batch(&flat, &Device::Cpu)?, windows))
    }

    fn frames_of(&self, refs: Vec<SampleRef>, val: bool) -> Result<Vec<Vec<Frame>>> {
        let data = if val { &self.data.val } else { &self.data.train };
        refs.into_iter().map(|r| data.get(r, WINDOW_MODE)).collect()
    }

    /// Mean L1 of the centre frame over `frames` windows, no gradient.
    pub fn center_l1(&self, frames: &[Vec<Frame>]) -> Result<f64> {
        let (x, windows) = self.windows(frames)?;
        let y = self.vdec.decode_latents(&self.vdec.embed_windows(&windows)?)?.detach();
        let (n, c, h, w) = x.dims4()?;
        let center = |t: &Tensor| -> Result<Tensor> {
            Ok(t.reshape((n / WINDOW, WINDOW, c, h, w))?.narrow(1, 1, 1)?)
        };
        scalar(&l1_loss(&center(&y)?, &center(&x)?)?)
    }

    /// Validation windows, at most `validation_samples` of them.
    pub fn validation_windows(&self) -> Result<Vec<Vec<Frame>>> {
        let refs = self
            .data
            .val
            .sample_refs(WINDOW_MODE, self.cfg.seed)
            .into_iter()
            .take(self.cfg.validation_samples.max(1))
            .collect();
        self.frames_of(refs, true)
    }
}

impl Trainer for VideoDecoderTrainer {
    fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn step_index(&self) -> u64 {
        self.step
    }

    fn train_step(&mut self) -> Result<StepLog> {
        self.check_tokenizer()?;
        let step = self.step;
        let lr = self.cfg.schedule.lr_at(step);
        let refs = self.plan.refs_at(&self.data.train, step);
        let frames = self.frames_of(refs, false)?;
        let (x, windows) = self.windows(&frames)?;
        let x_hat = self.vdec.decode_latents(&self.vdec.embed_windows(&windows)?)?;
        let w = self.weights;
        let adversarial = w.adversarial_active(step);
        let fake = if adversarial { Some(self.disc.forward(&x_hat)?) } else { None };
        let phi: Option<&dyn FeatureNet> = (w.perceptual > 0.0).then_some(&self.phi as &dyn FeatureNet);
        let loss = vdec_loss(&x_hat, &x, &w, phi, fake.as_ref(), step)?;
        let d_loss = if adversarial {
            let real = self.disc.forward(&x)?;
            let fake = self.disc.forward(&x_hat.detach())?;
            Some(discriminator_loss(&real, &fake)?)
        } else {
            None
        };
        let mut log = StepLog::new(step, lr);
        let total = scalar(&loss)?;
        if !total.is_finite() {
            return Err(Error::Numerical {
                component: "video decoder".into(),
                reason: format!("loss {total}"),
            });
        }
        log.terms.insert("total".into(), total);
        log.terms.insert("l1".into(), scalar(&l1_loss(&x_hat.detach(), &x)?)?);
        if let Some(f) = &fake {
            log.terms.insert(GENERATOR_TERM.into(), scalar(&generator_loss(f)?)?);
        }
        if let Some(d) = &d_loss {
            let v = scalar(d)?;
            if !v.is_finite() {
                return Err(Error::Numerical {
                    component: "discriminator".into(),
                    reason: format!("loss {v}"),
                });
            }
            log.terms.insert("disc".into(), v);
        }
        let grads = loss.backward()?;
        self.gen_opt.step(&grads, lr)?;
        if let Some(d) = d_loss {
            self.disc_opt.step(&d.backward()?, lr)?;
        }
        self.step += 1;
        Ok(log)
    }

    fn validate(&mut self) -> Result<BTreeMap<String, f64>> {
        self.check_tokenizer()?;
        let windows = self.validation_windows()?;
        let mut out = BTreeMap::new();
        if !windows.is_empty() {
            out.insert("val_center_l1".into(), self.center_l1(&windows)?);
        }
        Ok(out)
    }

    fn save(&self, dir: &Path) -> Result<CheckpointManifest> {
        self.check_tokenizer()?;
        save_checkpoint(
            dir,
            &self.cfg,
            self.step,
            &self.store,
            &[("gen", &self.gen_opt), ("disc", &self.disc_opt)],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::testutil::{tiny_config, tiny_data};
    use crate::train::TokenizerTrainer;

    fn trained_tokenizer(dir: &Path) -> ParamStore {
        let cfg = tiny_config(Stage::Tok, dir);
        let mut t = TokenizerTrainer::new(cfg, tiny_data()).unwrap();
        for _ in 0..4 {
            t.train_step().unwrap();
        }
        t.save(&dir.join("tok")).unwrap();
        load(dir)
    }

    fn load(dir: &Path) -> ParamStore {
        Checkpoint::open(&dir.join("tok")).unwrap().load_store(&Device::Cpu).unwrap()
    }

    #[test]
    fn inflated_start_matches_image_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let tok_store = trained_tokenizer(dir.path());
        let cfg = tiny_config(Stage::Vdec, dir.path());
        let t = VideoDecoderTrainer::new(cfg, tok_store, tiny_data()).unwrap();
        let windows = t.validation_windows().unwrap();
        let (_, tw) = t.windows(&windows).unwrap();
        let video = t.decoder().decode_windows(&tw).unwrap();
        for (w, frames) in tw.iter().zip(&video) {
            let image = t.tokenizer().decode(&t.tokenizer().embed(w.center()).unwrap()).unwrap();
            for (a, b) in frames[1].data().iter().zip(image.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn tokenizer_frozen_gate_honored_and_resume_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tok_store = trained_tokenizer(dir.path());
        let cfg = tiny_config(Stage::Vdec, dir.path());
        let mut t = VideoDecoderTrainer::new(cfg, tok_store, tiny_data()).unwrap();
        let h0 = t.discriminator_hash().unwrap();
        let windows = t.validation_windows().unwrap();
        let before = t.center_l1(&windows).unwrap();
        for _ in 0..3 {
            t.train_step().unwrap();
            assert_eq!(t.discriminator_hash().unwrap(), h0);
        }
        let gated = t.train_step().unwrap();
        assert!(gated.term(GENERATOR_TERM).is_some());
        assert_ne!(t.discriminator_hash().unwrap(), h0);
        t.check_tokenizer().unwrap();
        assert_ne!(t.center_l1(&windows).unwrap(), before);

        t.save(&dir.path().join("vd")).unwrap();
        let ck = Checkpoint::open(&dir.path().join("vd")).unwrap();
        let mut r = VideoDecoderTrainer::resume(&ck, load(dir.path()), tiny_data()).unwrap();
        assert_eq!(t.train_step().unwrap(), r.train_step().unwrap());
    }

    #[test]
    fn tokenizer_drift_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let tok_store = trained_tokenizer(dir.path());
        let cfg = tiny_config(Stage::Vdec, dir.path());
        let var = tok_store.named().into_iter().find(|(n, _)| n.starts_with("encoder.")).unwrap().1;
        let mut t = VideoDecoderTrainer::new(cfg, tok_store, tiny_data()).unwrap();
        var.set(&(var.as_tensor() * 2.0).unwrap()).unwrap();
        assert!(matches!(t.train_step(), Err(Error::Numerical { .. })));
    }
}
