//! Feature-extractor plugins: the perceptual loss network and the
//! self-supervised teacher.
//!
//! The defaults are fixed random networks so nothing here needs downloaded
//! weights. Pretrained extractors slot in by implementing the same traits.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// An ordered set of layer activations `phi_l(x)` for image batches `[B, 3, H, W]`.
pub trait FeatureNet: Send + Sync {
    fn name(&self) -> String;
    fn num_layers(&self) -> usize;
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Maps an image batch to `[B, n, dim]` per-patch features aligned to the
/// tokenizer's latent grid (`n` positions, row-major).
pub trait Teacher: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn features(&self, x: &Tensor) -> Result<Tensor>;
}

fn random_tensor(seed: u64, shape: &[usize], std: f64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn tensor_hash(ts: &[&Tensor]) -> Result<String> {
    let mut h = Sha256::new();
    for t in ts {
        for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

/// Layer `l` returns `scales[l] * x`.
#[derive(Debug, Clone)]
pub struct ScaledIdentity {
    pub scales: Vec<f64>,
}

impl FeatureNet for ScaledIdentity {
    fn name(&self) -> String {
        format!("scaled-identity{:?}", self.scales)
    }

    fn num_layers(&self) -> usize {
        self.scales.len()
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.scales.iter().map(|&s| Ok((x * s)?)).collect()
    }
}

/// Fixed random conv/ReLU stack; activations after each stage are the layers.
#[derive(Debug, Clone)]
pub struct RandomConvFeatures {
    weights: Vec<(Tensor, usize)>,
    hash: String,
}

impl RandomConvFeatures {
    pub fn new(seed: u64, widths: &[usize]) -> Result<Self> {
        let mut weights = Vec::with_capacity(widths.len());
        let mut in_ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            let stride = if i == 0 { 1 } else { 2 };
            weights.push((random_tensor(seed.wrapping_add(i as u64), &[w, in_ch, 3, 3], std)?, stride));
            in_ch = w;
        }
        let hash = tensor_hash(&weights.iter().map(|(t, _)| t).collect::<Vec<_>>())?;
        Ok(Self { weights, hash })
    }

    pub fn desk_default() -> Self {
        Self::new(0x5eed, &[8, 16, 32]).expect("static shapes")
    }
}

impl FeatureNet for RandomConvFeatures {
    fn name(&self) -> String {
        format!("random-conv-{}", self.hash)
    }

    fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.weights.len());
        for (w, stride) in &self.weights {
            let w = w.to_dtype(h.dtype())?;
            h = h.conv2d(&w, 1, *stride, 1, 1)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Average-pools each `patch x patch` cell to a `sub x sub x 3` descriptor
/// and applies a fixed random projection to `dim` features.
#[derive(Debug, Clone)]
pub struct RandomPatchTeacher {
    patch: usize,
    sub: usize,
    projection: Tensor,
    hash: String,
}

impl RandomPatchTeacher {
    pub fn new(seed: u64, patch: usize, dim: usize) -> Result<Self> {
        let sub = [4, 2, 1].into_iter().find(|s| patch % s == 0).unwrap_or(1);
        let fan_in = 3 * sub * sub;
        let projection = random_tensor(seed, &[fan_in, dim], 1.0 / (fan_in as f64).sqrt())?;
        let hash = tensor_hash(&[&projection])?;
        Ok(Self {
            patch,
            sub,
            projection,
            hash,
        })
    }
}

impl Teacher for RandomPatchTeacher {
    fn name(&self) -> String {
        format!("random-patch-teacher-{}", self.hash)
    }

    fn dim(&self) -> usize {
        self.projection.dim(1).unwrap_or(0)
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Dimension(format!(
                "teacher patch {} does not tile {h}x{w}",
                self.patch
            )));
        }
        let cell = self.patch / self.sub;
        let pooled = x.avg_pool2d(cell)?;
        let (gh, gw, s) = (h / self.patch, w / self.patch, self.sub);
        let desc = pooled
            .reshape((b, c, gh, s, gw, s))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b * gh * gw, c * s * s))?;
        let proj = self.projection.to_dtype(x.dtype())?;
        Ok(desc.matmul(&proj)?.reshape((b, gh * gw, self.dim()))?)
    }
}
