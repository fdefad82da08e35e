//! Convolutional building blocks shared by the image and video models.
//!
//! Video tensors use a folded `[B*T, C, H, W]` layout (time-major within each
//! batch item), so every per-frame layer (norms, activations, resampling)
//! applies unchanged. Only [`Conv::Temporal`] mixes information across time.

use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn down(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    spec: ConvSpec,
}

impl Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.spec.padding, self.spec.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.spec.out_ch, 1, 1))?)?)
    }
}

/// Convolution with temporal extent `kt` over windows of `frames` frames,
/// zero-padded in time so the output keeps all `frames` time steps.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: Tensor,
    bias: Tensor,
    spec: ConvSpec,
    frames: usize,
}

impl Conv3d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, _, _) = x.dims4()?;
        let t = self.frames;
        if n % t != 0 {
            return Err(Error::Dimension(format!(
                "folded batch {n} is not a multiple of {t} frames"
            )));
        }
        let kt = self.weight.dim(2)?;
        let half = kt / 2;
        let mut acc: Option<Tensor> = None;
        for dt in 0..kt {
            let w = self.weight.narrow(2, dt, 1)?.squeeze(2)?.contiguous()?;
            let y = x.conv2d(&w, self.spec.padding, self.spec.stride, 1, 1)?;
            let (_, c, h, wd) = y.dims4()?;
            let y = y.reshape((n / t, t, c, h, wd))?;
            // out[t] += y[t + dt - half], zero outside the window
            let shift = dt as isize - half as isize;
            let shifted = shift_time(&y, shift)?;
            acc = Some(match acc {
                None => shifted,
                Some(a) => (a + shifted)?,
            });
        }
        let y = acc.expect("kt >= 1");
        let (b, t, c, h, w) = y.dims5()?;
        let y = y.reshape((b * t, c, h, w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.spec.out_ch, 1, 1))?)?)
    }
}

/// `out[:, t] = y[:, t + shift]`, zero where the source index leaves the window.
fn shift_time(y: &Tensor, shift: isize) -> Result<Tensor> {
    if shift == 0 {
        return Ok(y.clone());
    }
    let t = y.dim(1)?;
    let s = shift.unsigned_abs();
    if s >= t {
        return Ok(y.zeros_like()?);
    }
    let zeros = y.narrow(1, 0, s)?.zeros_like()?;
    let parts = if shift > 0 {
        [y.narrow(1, s, t - s)?, zeros]
    } else {
        [zeros, y.narrow(1, 0, t - s)?]
    };
    Ok(Tensor::cat(&parts, 1)?)
}

#[derive(Debug, Clone)]
pub enum Conv {
    Plain(Conv2d),
    Temporal(Conv3d),
}

/// Layer construction context: 2D, or temporal over windows of `frames`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Two,
    Three { frames: usize, extent: usize },
}

impl Conv {
    pub fn new(vs: &Scope, spec: ConvSpec, dims: Dims) -> Result<Self> {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let bias = vs.get("bias", &[spec.out_ch], Init::Zeros)?;
        Ok(match dims {
            Dims::Two => {
                let weight = vs.get(
                    "weight",
                    &[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel],
                    Init::Uniform(bound),
                )?;
                Conv::Plain(Conv2d { weight, bias, spec })
            }
            Dims::Three { frames, extent } => {
                let weight = vs.get(
                    "weight",
                    &[spec.out_ch, spec.in_ch, extent, spec.kernel, spec.kernel],
                    Init::Uniform(bound / (extent as f64).sqrt()),
                )?;
                Conv::Temporal(Conv3d {
                    weight,
                    bias,
                    spec,
                    frames,
                })
            }
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Conv::Plain(c) => c.forward(x),
            Conv::Temporal(c) => c.forward(x),
        }
    }
}

pub fn group_norm(vs: &Scope, channels: usize) -> Result<GroupNorm> {
    let groups = [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .expect("1 divides everything");
    let w = vs.get("weight", &[channels], Init::Ones)?;
    let b = vs.get("bias", &[channels], Init::Zeros)?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-6)?)
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(vs: &Scope, in_ch: usize, out_ch: usize, dims: Dims) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(&vs.pp("norm1"), in_ch)?,
            conv1: Conv::new(&vs.pp("conv1"), ConvSpec::same(in_ch, out_ch, 3), dims)?,
            norm2: group_norm(&vs.pp("norm2"), out_ch)?,
            conv2: Conv::new(&vs.pp("conv2"), ConvSpec::same(out_ch, out_ch, 3), dims)?,
            skip: if in_ch != out_ch {
                Some(Conv::new(&vs.pp("skip"), ConvSpec::same(in_ch, out_ch, 1), dims)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Nearest-neighbour 2x upsampling built from differentiable reshapes.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::new(&[[[[1f32, 2.], [3., 4.]]]], &Device::Cpu).unwrap();
        let y = upsample2x(&x).unwrap();
        let rows: Vec<Vec<f32>> = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        assert_eq!(rows[0], vec![1., 1., 2., 2.]);
        assert_eq!(rows[3], vec![3., 3., 4., 4.]);
    }

    #[test]
    fn temporal_conv_matches_direct_sum() {
        let store = ParamStore::new(3, &Device::Cpu);
        let spec = ConvSpec::same(2, 3, 3);
        let conv = Conv::new(&store.root(), spec, Dims::Three { frames: 3, extent: 3 }).unwrap();
        let Conv::Temporal(c3) = &conv else { unreachable!() };
        let x = Tensor::randn(0f32, 1., (6, 2, 5, 5), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        // direct: out[b,t] = sum_dt conv2d(x[b, t+dt-1], w[dt]) + bias
        for b in 0..2 {
            for t in 0..3 {
                let mut acc = Tensor::zeros((1, 3, 5, 5), candle_core::DType::F32, &Device::Cpu).unwrap();
                for dt in 0..3 {
                    let src = t as isize + dt as isize - 1;
                    if !(0..3).contains(&src) {
                        continue;
                    }
                    let xi = x.narrow(0, b * 3 + src as usize, 1).unwrap();
                    let w = c3.weight.narrow(2, dt, 1).unwrap().squeeze(2).unwrap().contiguous().unwrap();
                    acc = (acc + xi.conv2d(&w, 1, 1, 1, 1).unwrap()).unwrap();
                }
                let got = y.narrow(0, b * 3 + t, 1).unwrap();
                let diff = (got - acc).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
                assert!(diff < 1e-5, "b{b} t{t}: {diff}");
            }
        }
    }
}
