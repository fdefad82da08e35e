//! Named parameter storage with seeded, reproducible initialization.
//!
//! Backed by [`candle_nn::VarMap`], so checkpoints are plain safetensors
//! archives keyed by dotted parameter names.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

pub struct ParamStore {
    vars: VarMap,
    rng: RefCell<ChaCha8Rng>,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            vars: VarMap::new(),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn var_map(&self) -> &VarMap {
        &self.vars
    }

    /// Returns the parameter `name`, creating it with `init` when absent.
    pub fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut data = self.vars.data().lock().expect("var map lock");
        if let Some(v) = data.get(name) {
            if v.dims() != shape {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f32> = {
            let mut rng = self.rng.borrow_mut();
            match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..numel).map(|_| d.sample(&mut *rng) as f32).collect()
                }
                Init::Uniform(b) => {
                    let d = Uniform::new_inclusive(-b, b).map_err(|e| Error::Config(e.to_string()))?;
                    (0..numel).map(|_| d.sample(&mut *rng) as f32).collect()
                }
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(values, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.to_dtype(DType::F32)?.contiguous()?)?;
        self.vars
            .data()
            .lock()
            .expect("var map lock")
            .insert(name.to_string(), var);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.data().lock().expect("var map lock").get(name).cloned()
    }

    /// All parameters in name order.
    pub fn named(&self) -> BTreeMap<String, Var> {
        self.vars
            .data()
            .lock()
            .expect("var map lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.named()
            .into_iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named().values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 values in name order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.named() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals: Vec<f32> = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.vars.save(path)?;
        Ok(())
    }

    /// Loads values for every parameter already registered; names missing from
    /// the archive are an error.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.vars.load(path)?;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snap: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in self.named() {
            let t = snap
                .get(&k)
                .ok_or_else(|| Error::Config(format!("snapshot lacks parameter {k}")))?;
            v.set(t)?;
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_init(&self.path(name), shape, init)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}
