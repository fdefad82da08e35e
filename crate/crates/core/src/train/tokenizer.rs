//! Tokenizer + image decoder fine-tuning: one generator step, then one
//! discriminator step on the same batch once the adversarial gate opens.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::data::{Frame, SampleMode};
use crate::error::{Error, Result};
use crate::losses::{
    codebook_loss, discriminator_loss, generator_loss, l1_loss, reconstruction_loss, ssl_loss,
    total_loss, FeatureNet, LossComponents, LossWeights, RandomConvFeatures, RandomPatchTeacher,
    SslAdapter, Teacher,
};
use crate::metrics::psnr;
use crate::params::ParamStore;
use crate::train::batches::{BatchPlan, TrainData};
use crate::train::checkpoint::{save_checkpoint, Checkpoint, CheckpointManifest};
use crate::train::config::{RunConfig, Stage};
use crate::train::log::{StepLog, GENERATOR_TERM};
use crate::train::optim::AdamW;
use crate::train::{scalar, Trainer};
use crate::vq::{PatchDiscriminator, VqAutoencoder};

pub const DISC_PREFIX: &str = "disc.";

pub struct TokenizerTrainer {
    cfg: RunConfig,
    weights: LossWeights,
    store: ParamStore,
    model: VqAutoencoder,
    adapter: SslAdapter,
    disc: PatchDiscriminator,
    phi: RandomConvFeatures,
    teacher: RandomPatchTeacher,
    gen_opt: AdamW,
    disc_opt: AdamW,
    data: TrainData,
    plan: BatchPlan,
    step: u64,
}

impl TokenizerTrainer {
    pub fn new(cfg: RunConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        if cfg.stage != Stage::Tok {
            return Err(Error::Config("tokenizer trainer needs a tok-stage config".into()));
        }
        let weights = cfg.loss.expect("validated");
        let features = cfg.features.clone().expect("validated");
        let store = ParamStore::new(cfg.seed, &Device::Cpu);
        let model = VqAutoencoder::new(&store, &cfg.autoencoder)?;
        let root = store.root();
        let teacher = features.teacher(&cfg.autoencoder)?;
        let adapter = SslAdapter::new(&root.pp("ssl"), cfg.autoencoder.code_dim, teacher.dim())?;
        let disc = PatchDiscriminator::for_autoencoder(&root.pp("disc"), &cfg.autoencoder)?;
        let named = store.named();
        let gen_params = named
            .iter()
            .filter(|(n, _)| !n.starts_with(DISC_PREFIX))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        let disc_params = named
            .iter()
            .filter(|(n, _)| n.starts_with(DISC_PREFIX))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        let plan = BatchPlan::new(&data.train, SampleMode::Image, cfg.seed, cfg.batch_size)?;
        Ok(Self {
            weights,
            gen_opt: AdamW::new(gen_params, cfg.optimizer.clone())?,
            disc_opt: AdamW::new(disc_params, cfg.optimizer.clone())?,
            phi: features.perceptual()?,
            teacher,
            store,
            model,
            adapter,
            disc,
            data,
            plan,
            step: 0,
            cfg,
        })
    }

    /// Rebuilds the trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(ckpt: &Checkpoint, data: TrainData) -> Result<Self> {
        ckpt.expect_stage(Stage::Tok)?;
        let mut t = Self::new(ckpt.config().clone(), data)?;
        ckpt.restore_into(&mut t.store)?;
        ckpt.restore_optimizer("gen", &mut t.gen_opt)?;
        ckpt.restore_optimizer("disc", &mut t.disc_opt)?;
        t.step = ckpt.manifest.step;
        Ok(t)
    }

    pub fn model(&self) -> &VqAutoencoder {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    /// Training images of `step`, `[B, 3, H, W]`.
    pub fn batch_at(&mut self, step: u64) -> Result<Tensor> {
        let refs = self.plan.refs_at(&self.data.train, step);
        let frames = refs
            .into_iter()
            .map(|r| Ok(self.data.train.get(r, SampleMode::Image)?.remove(0)))
            .collect::<Result<Vec<Frame>>>()?;
        Frame::batch(&frames, &Device::Cpu)
    }

    /// Mean absolute reconstruction error over `frames`, no gradient.
    pub fn reconstruction_l1(&self, frames: &[Frame]) -> Result<f64> {
        let x = Frame::batch(frames, &Device::Cpu)?;
        let out = self.model.forward(&x)?;
        scalar(&l1_loss(&out.reconstruction.detach(), &x)?)
    }

    /// Hash over the discriminator's parameters only.
    pub fn discriminator_hash(&self) -> Result<String> {
        let s = ParamStore::new(0, &Device::Cpu);
        for (n, v) in self.store.named() {
            if n.starts_with(DISC_PREFIX) {
                s.insert(&n, v.as_tensor())?;
            }
        }
        s.content_hash()
    }
}

impl Trainer for TokenizerTrainer {
    fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn step_index(&self) -> u64 {
        self.step
    }

    fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let lr = self.cfg.schedule.lr_at(step);
        let x = self.batch_at(step)?;
        let w = self.weights;
        let out = self.model.forward(&x)?;
        let phi: Option<&dyn FeatureNet> = (w.perceptual > 0.0).then_some(&self.phi as &dyn FeatureNet);
        let rec = reconstruction_loss(&out.reconstruction, &x, &w, phi)?;
        let cb = codebook_loss(&out.quantized, &out.latents, w.beta)?;
        let ssl = if w.ssl > 0.0 {
            Some(ssl_loss(&self.adapter, &out.tokens, &self.teacher.features(&x)?)?)
        } else {
            None
        };
        let adversarial = w.adversarial_active(step);
        let gen = if adversarial {
            Some(generator_loss(&self.disc.forward(&out.reconstruction)?)?)
        } else {
            None
        };
        let components = LossComponents {
            reconstruction: Some(rec.clone()),
            codebook: Some(cb.clone()),
            ssl: ssl.clone(),
            generator: gen.clone(),
        };
        let total = total_loss(&components, &w, step)?;
        let d_loss = if adversarial {
            let real = self.disc.forward(&x)?;
            let fake = self.disc.forward(&out.reconstruction.detach())?;
            Some(discriminator_loss(&real, &fake)?)
        } else {
            None
        };

        let mut log = StepLog::new(step, lr);
        log.terms.insert("rec".into(), scalar(&rec)?);
        log.terms.insert("l1".into(), scalar(&l1_loss(&out.reconstruction.detach(), &x)?)?);
        log.terms.insert("cb".into(), scalar(&cb)?);
        if let Some(s) = &ssl {
            log.terms.insert("ssl".into(), scalar(s)?);
        }
        if let Some(g) = &gen {
            log.terms.insert(GENERATOR_TERM.into(), scalar(g)?);
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
        let t = scalar(&total)?;
        if !t.is_finite() {
            return Err(Error::Numerical {
                component: "total".into(),
                reason: format!("loss {t}"),
            });
        }
        log.terms.insert("total".into(), t);

        let grads = total.backward()?;
        self.gen_opt.step(&grads, lr)?;
        if let Some(d) = d_loss {
            let grads = d.backward()?;
            self.disc_opt.step(&grads, lr)?;
        }
        self.step += 1;
        Ok(log)
    }

    fn validate(&mut self) -> Result<BTreeMap<String, f64>> {
        let refs = self.data.val.sample_refs(SampleMode::Image, self.cfg.seed);
        let frames = refs
            .into_iter()
            .take(self.cfg.validation_samples.max(1))
            .map(|r| Ok(self.data.val.get(r, SampleMode::Image)?.remove(0)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = BTreeMap::new();
        if frames.is_empty() {
            return Ok(out);
        }
        let x = Frame::batch(&frames, &Device::Cpu)?;
        let y = self.model.forward(&x)?.reconstruction.detach();
        out.insert("val_l1".into(), scalar(&l1_loss(&y, &x)?)?);
        let recon = Frame::unbatch(&y)?;
        let p: f64 = recon.iter().zip(&frames).map(|(a, b)| psnr(a, b)).sum::<Result<f64>>()?;
        out.insert("val_psnr".into(), p / frames.len() as f64);
        Ok(out)
    }

    fn save(&self, dir: &Path) -> Result<CheckpointManifest> {
        save_checkpoint(
            dir,
            &self.cfg,
            self.step,
            &self.store,
            &[("gen", &self.gen_opt), ("disc", &self.disc_opt)],
        )
    }
}
