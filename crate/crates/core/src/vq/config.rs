use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscriminatorVariant {
    /// Patch discriminator with four stride-2 stages.
    Baseline,
    /// One extra stride-2 stage: 64 patches at 256x256 input.
    Ours,
}

impl DiscriminatorVariant {
    pub fn downsampling_stages(self) -> usize {
        match self {
            DiscriminatorVariant::Baseline => 4,
            DiscriminatorVariant::Ours => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub variant: DiscriminatorVariant,
    pub base_channels: usize,
    pub max_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub input_size: usize,
    pub compression_factor: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Channel width per resolution level, `log2(compression_factor) + 1` entries.
    pub channels: Vec<usize>,
    pub discriminator: DiscriminatorConfig,
}

impl AutoencoderConfig {
    pub fn paper_scale() -> Self {
        Self {
            input_size: 256,
            compression_factor: 16,
            codebook_size: 8192,
            code_dim: 64,
            channels: vec![128, 128, 256, 256, 512],
            discriminator: DiscriminatorConfig {
                variant: DiscriminatorVariant::Ours,
                base_channels: 64,
                max_channels: 512,
            },
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            input_size: 64,
            compression_factor: 16,
            codebook_size: 16,
            code_dim: 16,
            channels: vec![16, 16, 32, 32, 48],
            discriminator: DiscriminatorConfig {
                variant: DiscriminatorVariant::Ours,
                base_channels: 8,
                max_channels: 32,
            },
        }
    }

    pub fn levels(&self) -> usize {
        self.compression_factor.trailing_zeros() as usize
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.compression_factor
    }

    /// Tokens per frame.
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Side length of the discriminator's logit map.
    pub fn patch_side(&self) -> usize {
        self.input_size >> self.discriminator.variant.downsampling_stages()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.compression_factor.is_power_of_two() || self.compression_factor < 2 {
            return Err(Error::Config(format!(
                "compression factor {} must be a power of two >= 2",
                self.compression_factor
            )));
        }
        if self.input_size % self.compression_factor != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by compression factor {}",
                self.input_size, self.compression_factor
            )));
        }
        if self.channels.len() != self.levels() + 1 {
            return Err(Error::Config(format!(
                "need {} channel widths, got {}",
                self.levels() + 1,
                self.channels.len()
            )));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook must not be empty".into()));
        }
        if self.code_dim == 0 || self.channels.contains(&0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        if self.patch_side() == 0 {
            return Err(Error::Config(format!(
                "input {} too small for the {:?} discriminator",
                self.input_size, self.discriminator.variant
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_shapes() {
        let c = AutoencoderConfig::paper_scale();
        c.validate().unwrap();
        assert_eq!(c.tokens_per_frame(), 256);
        assert_eq!(c.patch_side(), 8);
        let mut b = c.clone();
        b.discriminator.variant = DiscriminatorVariant::Baseline;
        assert_eq!(b.patch_side() * b.patch_side(), 256);
    }

    #[test]
    fn desk_scale_shapes() {
        let c = AutoencoderConfig::desk_scale();
        c.validate().unwrap();
        assert_eq!(c.tokens_per_frame(), 16);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut c = AutoencoderConfig::desk_scale();
        c.input_size = 72;
        assert!(c.validate().is_err());
        let mut c = AutoencoderConfig::desk_scale();
        c.channels.pop();
        assert!(c.validate().is_err());
    }
}
