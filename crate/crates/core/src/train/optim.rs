//! AdamW with decoupled weight decay and serializable moment state.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Parameters whose name contains any of these substrings skip weight decay.
    pub no_decay: Vec<String>,
}

impl AdamWConfig {
    /// Betas (0.9, 0.95), eps 1e-5, decay 0.1: the LLaMA-2 recipe.
    pub fn llama2() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-5,
            weight_decay: 0.1,
            no_decay: default_no_decay(),
        }
    }

    /// Betas (0.9, 0.999), eps 1e-8, decay 0.01.
    pub fn standard() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            no_decay: default_no_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }

    pub fn decays(&self, name: &str) -> bool {
        self.weight_decay > 0.0 && !self.no_decay.iter().any(|s| name.contains(s.as_str()))
    }
}

fn default_no_decay() -> Vec<String> {
    ["norm", "embed", "codebook", "bias"].map(String::from).to_vec()
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
    decay: bool,
}

pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    t: u64,
}

impl AdamW {
    /// `params` in a fixed order (name order keeps runs reproducible).
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        let slots = params
            .into_iter()
            .map(|(name, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok(Slot {
                    decay: cfg.decays(&name),
                    name,
                    m: z.clone(),
                    v: z,
                    var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, slots, t: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// One update at learning rate `lr`. Parameters without a gradient keep
    /// their value and moments.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            // leaf gradients still carry the forward graph
            let g = &g.detach();
            s.m = ((&s.m * b1)? + (g * (1.0 - b1))?)?;
            s.v = ((&s.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&s.m / c1)?;
            let v_hat = (&s.v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let p = s.var.as_tensor();
            let p = if s.decay {
                (p * (1.0 - lr * self.cfg.weight_decay))?
            } else {
                p.clone()
            };
            s.var.set(&(p - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for s in &self.slots {
            map.insert(format!("m.{}", s.name), s.m.clone());
            map.insert(format!("v.{}", s.name), s.v.clone());
        }
        map.insert("t".into(), Tensor::new(&[self.t as f64], &Device::Cpu)?);
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let device = self.slots.first().map(|s| s.var.device().clone()).unwrap_or(Device::Cpu);
        let map = candle_core::safetensors::load(path, &device)?;
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("optimizer state {} lacks {k}", path.display())))
        };
        let t = get("t")?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for s in &mut self.slots {
            let m = get(&format!("m.{}", s.name))?;
            let v = get(&format!("v.{}", s.name))?;
            if m.dims() != s.var.dims() || v.dims() != s.var.dims() {
                return Err(Error::Config(format!("optimizer state for {} has the wrong shape", s.name)));
            }
            s.m = m;
            s.v = v;
        }
        self.t = t.first().copied().unwrap_or(0.0) as u64;
        Ok(())
    }
}
