//! Low-rank adapters over linear and embedding layers.
//!
//! `y = base(x) + (alpha / r) * B(A(x))` with `A` small random and `B` zero,
//! so an adapted layer starts out identical to its base.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= rows.min(cols) {
            return Err(Error::Config(format!(
                "LoRA rank {} must be in [1, {})",
                self.rank,
                rows.min(cols)
            )));
        }
        Ok(())
    }
}

/// Storage precision for frozen base weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrozenPrecision {
    #[default]
    F32,
    Bf16,
}

#[derive(Debug, Clone)]
struct Adapter {
    a: Tensor,
    b: Tensor,
    scale: f64,
}

#[derive(Debug, Clone)]
struct Base {
    weight: Tensor,
    frozen: bool,
}

impl Base {
    fn new(weight: Tensor, frozen: bool, precision: FrozenPrecision) -> Result<Self> {
        let weight = if frozen {
            match precision {
                FrozenPrecision::F32 => weight.detach(),
                FrozenPrecision::Bf16 => weight.detach().to_dtype(DType::BF16)?,
            }
        } else {
            weight
        };
        Ok(Self { weight, frozen })
    }

    fn value(&self) -> Result<Tensor> {
        Ok(if self.frozen {
            self.weight.to_dtype(DType::F32)?
        } else {
            self.weight.clone()
        })
    }
}

/// Bias-free linear layer `y = x W^T`, optionally adapted.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    base: Base,
    adapter: Option<Adapter>,
}

impl LoraLinear {
    pub fn new(
        vs: &Scope,
        in_dim: usize,
        out_dim: usize,
        lora: Option<LoraConfig>,
        precision: FrozenPrecision,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = vs.get("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        Self::adapt(vs, weight, lora, precision)
    }

    /// Wraps an existing `[out, in]` weight; with `lora` set the weight is
    /// frozen and an adapter pair is registered next to it.
    pub fn adapt(
        vs: &Scope,
        weight: Tensor,
        lora: Option<LoraConfig>,
        precision: FrozenPrecision,
    ) -> Result<Self> {
        let (out_dim, in_dim) = weight.dims2()?;
        let adapter = match lora {
            None => None,
            Some(cfg) => {
                cfg.check(out_dim, in_dim)?;
                let bound = 1.0 / (in_dim as f64).sqrt();
                Some(Adapter {
                    a: vs.get("lora_a", &[cfg.rank, in_dim], Init::Uniform(bound))?,
                    b: vs.get("lora_b", &[out_dim, cfg.rank], Init::Zeros)?,
                    scale: cfg.scale(),
                })
            }
        };
        Ok(Self {
            base: Base::new(weight, adapter.is_some(), precision)?,
            adapter,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.base.value()?.t()?)?;
        match &self.adapter {
            None => Ok(y),
            Some(ad) => {
                let low = x.broadcast_matmul(&ad.a.t()?)?.broadcast_matmul(&ad.b.t()?)?;
                Ok((y + (low * ad.scale)?)?)
            }
        }
    }
}

/// Embedding table with an optional adapter: `E[i] + s * A[i] B^T`.
#[derive(Debug, Clone)]
pub struct LoraEmbedding {
    base: Base,
    adapter: Option<Adapter>,
    dim: usize,
}

impl LoraEmbedding {
    pub fn new(
        vs: &Scope,
        vocab: usize,
        dim: usize,
        lora: Option<LoraConfig>,
        precision: FrozenPrecision,
    ) -> Result<Self> {
        let weight = vs.get("weight", &[vocab, dim], Init::Normal(0.02))?;
        let adapter = match lora {
            None => None,
            Some(cfg) => {
                cfg.check(vocab, dim)?;
                Some(Adapter {
                    a: vs.get("lora_a", &[vocab, cfg.rank], Init::Normal(1.0 / (cfg.rank as f64).sqrt()))?,
                    b: vs.get("lora_b", &[dim, cfg.rank], Init::Zeros)?,
                    scale: cfg.scale(),
                })
            }
        };
        Ok(Self {
            base: Base::new(weight, adapter.is_some(), precision)?,
            adapter,
            dim,
        })
    }

    /// `ids` of any shape to `[..., dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut out_shape = ids.dims().to_vec();
        out_shape.push(self.dim);
        let flat = ids.flatten_all()?;
        let y = self.base.value()?.index_select(&flat, 0)?;
        let y = match &self.adapter {
            None => y,
            Some(ad) => {
                let low = ad.a.index_select(&flat, 0)?.matmul(&ad.b.t()?)?;
                (y + (low * ad.scale)?)?
            }
        };
        Ok(y.reshape(out_shape)?)
    }
}

/// Root-mean-square layer norm with a learnable gain.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    weight: Tensor,
    eps: f64,
}

impl RmsNorm {
    pub fn new(vs: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.get("weight", &[dim], Init::Ones)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = x.broadcast_div(&(ms + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?)
    }
}
