//! Patch discriminator: a stack of stride-2 stages followed by two
//! size-preserving convolutions producing one logit per patch.
//!
//! Normalization is per-frame group norm rather than batch norm, so outputs do
//! not depend on batch composition and the layout inflates to 3D unchanged.

use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;

use crate::error::{Error, Result};
use crate::nn::{group_norm, leaky_relu, Conv, ConvSpec, Dims};
use crate::params::Scope;
use crate::vq::config::{AutoencoderConfig, DiscriminatorConfig};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    stages: Vec<(Conv, Option<GroupNorm>)>,
    logits: Conv,
    input_size: usize,
}

impl PatchDiscriminator {
    pub fn new(vs: &Scope, cfg: &DiscriminatorConfig, input_size: usize, dims: Dims) -> Result<Self> {
        let n_down = cfg.variant.downsampling_stages();
        if input_size >> n_down == 0 {
            return Err(Error::Config(format!(
                "input {input_size} too small for {n_down} stride-2 stages"
            )));
        }
        let width = |i: usize| (cfg.base_channels << i).min(cfg.max_channels);
        let mut stages = Vec::with_capacity(n_down + 1);
        let mut in_ch = 3;
        for i in 0..n_down {
            let s = vs.pp(format!("stage.{i}"));
            let conv = Conv::new(&s.pp("conv"), ConvSpec::down(in_ch, width(i)), dims)?;
            let norm = if i == 0 { None } else { Some(group_norm(&s.pp("norm"), width(i))?) };
            stages.push((conv, norm));
            in_ch = width(i);
        }
        let s = vs.pp(format!("stage.{n_down}"));
        let out_ch = width(n_down);
        stages.push((
            Conv::new(&s.pp("conv"), ConvSpec::same(in_ch, out_ch, 3), dims)?,
            Some(group_norm(&s.pp("norm"), out_ch)?),
        ));
        let logits = Conv::new(&vs.pp("logits"), ConvSpec::same(out_ch, 1, 3), dims)?;
        Ok(Self {
            stages,
            logits,
            input_size,
        })
    }

    pub fn for_autoencoder(vs: &Scope, cfg: &AutoencoderConfig) -> Result<Self> {
        Self::new(vs, &cfg.discriminator, cfg.input_size, Dims::Two)
    }

    /// `[N, 3, H, W]` images to `[N, 1, h, w]` unbounded patch logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (3, self.input_size, self.input_size) {
            return Err(Error::Dimension(format!(
                "discriminator expects 3x{s}x{s}, got {c}x{h}x{w}",
                s = self.input_size
            )));
        }
        let mut h = x.clone();
        for (conv, norm) in &self.stages {
            h = conv.forward(&h)?;
            if let Some(n) = norm {
                h = n.forward(&h)?;
            }
            h = leaky_relu(&h, SLOPE)?;
        }
        self.logits.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::vq::config::DiscriminatorVariant;
    use candle_core::Device;

    fn logits_side(variant: DiscriminatorVariant, size: usize) -> (usize, usize) {
        let store = ParamStore::new(0, &Device::Cpu);
        let cfg = DiscriminatorConfig { variant, base_channels: 2, max_channels: 4 };
        let d = PatchDiscriminator::new(&store.root(), &cfg, size, Dims::Two).unwrap();
        let x = Tensor::zeros((1, 3, size, size), candle_core::DType::F32, &Device::Cpu).unwrap();
        let y = d.forward(&x).unwrap();
        let (_, _, h, w) = y.dims4().unwrap();
        (h, w)
    }

    /// Golden patch counts at 256x256: ours 8x8 = 64, baseline 16x16 = 256.
    #[test]
    fn patch_counts_at_full_resolution() {
        assert_eq!(logits_side(DiscriminatorVariant::Ours, 256), (8, 8));
        assert_eq!(logits_side(DiscriminatorVariant::Baseline, 256), (16, 16));
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let store = ParamStore::new(4, &Device::Cpu);
        let cfg = AutoencoderConfig::desk_scale();
        let d = PatchDiscriminator::for_autoencoder(&store.root(), &cfg).unwrap();
        let x = Tensor::randn(0f32, 0.5, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let a = d.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = d.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let bad = Tensor::zeros((1, 3, 32, 32), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(d.forward(&bad).is_err());
    }
}
