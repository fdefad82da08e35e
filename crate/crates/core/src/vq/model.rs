use candle_core::{Device, Module, Tensor};
use candle_nn::GroupNorm;

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::nn::{group_norm, upsample2x, Conv, ConvSpec, Dims, ResBlock};
use crate::params::{ParamStore, Scope};
use crate::vq::config::AutoencoderConfig;
use crate::vq::quantizer::{quantize_map, straight_through, Codebook};

/// Continuous (or quantized) latents of one frame, `[n, d]` in row-major grid order.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    values: Tensor,
    grid_h: usize,
    grid_w: usize,
}

impl LatentGrid {
    pub fn new(values: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        let (n, _) = values.dims2()?;
        if n != grid_h * grid_w {
            return Err(Error::Dimension(format!(
                "latent grid has {n} rows, expected {grid_h}x{grid_w}"
            )));
        }
        Ok(Self { values, grid_h, grid_w })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.dim(1).unwrap_or(0)
    }

    /// `[1, d, h, w]` map view.
    pub fn to_map(&self) -> Result<Tensor> {
        Ok(self
            .values
            .reshape((self.grid_h, self.grid_w, self.dim()))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?)
    }

    pub fn from_map(map: &Tensor) -> Result<Self> {
        let (_, d, h, w) = map.dims4()?;
        let values = map.squeeze(0)?.permute((1, 2, 0))?.reshape((h * w, d))?;
        Self::new(values, h, w)
    }
}

/// Codebook indices of one frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexGrid {
    indices: Vec<u32>,
    grid_h: usize,
    grid_w: usize,
}

impl IndexGrid {
    pub fn new(indices: Vec<u32>, grid_h: usize, grid_w: usize) -> Result<Self> {
        if indices.len() != grid_h * grid_w {
            return Err(Error::Dimension(format!(
                "index grid has {} entries, expected {grid_h}x{grid_w}",
                indices.len()
            )));
        }
        Ok(Self { indices, grid_h, grid_w })
    }

    /// Square grid of `indices.len()` entries.
    pub fn square(indices: Vec<u32>) -> Result<Self> {
        let side = (indices.len() as f64).sqrt().round() as usize;
        Self::new(indices, side, side)
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check_range(&self, codebook_size: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= codebook_size) {
            Some(i) => Err(Error::Dimension(format!(
                "index {i} outside codebook of size {codebook_size}"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv,
    down: Vec<(ResBlock, Conv)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Encoder {
    pub fn new(vs: &Scope, cfg: &AutoencoderConfig) -> Result<Self> {
        let ch = &cfg.channels;
        let d2 = Dims::Two;
        let conv_in = Conv::new(&vs.pp("conv_in"), ConvSpec::same(3, ch[0], 3), d2)?;
        let down = (0..cfg.levels())
            .map(|i| {
                let s = vs.pp(format!("down.{i}"));
                Ok((
                    ResBlock::new(&s.pp("res"), ch[i], ch[i], d2)?,
                    Conv::new(&s.pp("downsample"), ConvSpec::down(ch[i], ch[i + 1]), d2)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let top = ch[cfg.levels()];
        Ok(Self {
            conv_in,
            down,
            mid: ResBlock::new(&vs.pp("mid"), top, top, d2)?,
            norm_out: group_norm(&vs.pp("norm_out"), top)?,
            conv_out: Conv::new(&vs.pp("conv_out"), ConvSpec::same(top, cfg.code_dim, 1), d2)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for (res, down) in &self.down {
            h = down.forward(&res.forward(&h)?)?;
        }
        let h = self.mid.forward(&h)?;
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

/// Image decoder. Built with [`Dims::Three`] it becomes the temporally
/// inflated video decoder operating on folded `[B*T, d, h, w]` input.
#[derive(Debug, Clone)]
pub struct Decoder {
    conv_in: Conv,
    mid: ResBlock,
    up: Vec<(Conv, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Decoder {
    pub fn new(vs: &Scope, cfg: &AutoencoderConfig, dims: Dims) -> Result<Self> {
        let ch = &cfg.channels;
        let top = ch[cfg.levels()];
        let up = (0..cfg.levels())
            .rev()
            .map(|i| {
                let s = vs.pp(format!("up.{i}"));
                Ok((
                    Conv::new(&s.pp("conv"), ConvSpec::same(ch[i + 1], ch[i], 3), dims)?,
                    ResBlock::new(&s.pp("res"), ch[i], ch[i], dims)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            conv_in: Conv::new(&vs.pp("conv_in"), ConvSpec::same(cfg.code_dim, top, 3), dims)?,
            mid: ResBlock::new(&vs.pp("mid"), top, top, dims)?,
            up,
            norm_out: group_norm(&vs.pp("norm_out"), ch[0])?,
            conv_out: Conv::new(&vs.pp("conv_out"), ConvSpec::same(ch[0], 3, 3), dims)?,
        })
    }

    /// Latent map to image batch; `tanh` bounds the output to [-1, 1].
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.mid.forward(&self.conv_in.forward(z)?)?;
        for (conv, res) in &self.up {
            h = res.forward(&conv.forward(&upsample2x(&h)?)?)?;
        }
        let h = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok(h.tanh()?)
    }
}

/// Intermediate tensors of one autoencoder pass, kept for the loss terms.
#[derive(Debug, Clone)]
pub struct AutoencoderOutput {
    /// Encoder output `z~`, `[B, d, h, w]`.
    pub latents: Tensor,
    /// Codebook rows `z`, `[B, d, h, w]`; gradients reach the codebook.
    pub quantized: Tensor,
    /// Straight-through tokens fed to the decoder.
    pub tokens: Tensor,
    pub indices: Vec<u32>,
    pub reconstruction: Tensor,
}

/// Encoder + quantizer (the tokenizer) and the image decoder.
#[derive(Debug, Clone)]
pub struct VqAutoencoder {
    cfg: AutoencoderConfig,
    encoder: Encoder,
    codebook: Codebook,
    decoder: Decoder,
    device: Device,
}

impl VqAutoencoder {
    pub fn new(store: &ParamStore, cfg: &AutoencoderConfig) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(&root.pp("encoder"), cfg)?,
            codebook: Codebook::new(&root.pp("codebook"), cfg.codebook_size, cfg.code_dim)?,
            decoder: Decoder::new(&root.pp("decoder"), cfg, Dims::Two)?,
            device: store.device().clone(),
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.input_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::Dimension(format!(
                "expected images of 3x{s}x{s}, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    fn check_map(&self, z: &Tensor) -> Result<()> {
        let (_, d, h, w) = z.dims4()?;
        let g = self.cfg.grid_side();
        if (d, h, w) != (self.cfg.code_dim, g, g) {
            return Err(Error::Dimension(format!(
                "expected latents of {}x{g}x{g}, got {d}x{h}x{w}",
                self.cfg.code_dim
            )));
        }
        Ok(())
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        self.encoder.forward(x)
    }

    pub fn quantize_batch(&self, latents: &Tensor) -> Result<(Tensor, Vec<u32>)> {
        self.check_map(latents)?;
        quantize_map(latents, &self.codebook)
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.check_map(z)?;
        self.decoder.forward(z)
    }

    /// Full differentiable pass used in training.
    pub fn forward(&self, x: &Tensor) -> Result<AutoencoderOutput> {
        let latents = self.encode_batch(x)?;
        let (quantized, indices) = self.quantize_batch(&latents)?;
        let tokens = straight_through(&latents, &quantized)?;
        let reconstruction = self.decoder.forward(&tokens)?;
        Ok(AutoencoderOutput {
            latents,
            quantized,
            tokens,
            indices,
            reconstruction,
        })
    }

    pub fn encode(&self, frame: &Frame) -> Result<LatentGrid> {
        let x = frame.to_tensor(&self.device)?.unsqueeze(0)?;
        LatentGrid::from_map(&self.encode_batch(&x)?)
    }

    pub fn quantize(&self, latents: &LatentGrid) -> Result<(LatentGrid, IndexGrid)> {
        let (h, w) = latents.grid();
        let (q, idx) = crate::vq::quantizer::quantize_rows(latents.values(), &self.codebook)?;
        Ok((LatentGrid::new(q, h, w)?, IndexGrid::new(idx, h, w)?))
    }

    pub fn decode(&self, quantized: &LatentGrid) -> Result<Frame> {
        let y = self.decode_batch(&quantized.to_map()?)?;
        Frame::from_tensor(&y.squeeze(0)?)
    }

    /// Codebook rows for an index grid.
    pub fn embed(&self, grid: &IndexGrid) -> Result<LatentGrid> {
        grid.check_range(self.cfg.codebook_size)?;
        let (h, w) = grid.grid();
        LatentGrid::new(self.codebook.lookup(grid.indices())?.detach(), h, w)
    }

    pub fn tokenize(&self, frame: &Frame) -> Result<IndexGrid> {
        Ok(self.quantize(&self.encode(frame)?)?.1)
    }

    /// Tokenizes a batch of frames in one pass.
    pub fn tokenize_frames(&self, frames: &[Frame]) -> Result<Vec<IndexGrid>> {
        let x = Frame::batch(frames, &self.device)?;
        let (_, idx) = self.quantize_batch(&self.encode_batch(&x)?)?;
        let g = self.cfg.grid_side();
        idx.chunks(g * g)
            .map(|c| IndexGrid::new(c.to_vec(), g, g))
            .collect()
    }

    /// encode, quantize, decode.
    pub fn transcode(&self, frame: &Frame) -> Result<Frame> {
        let (q, _) = self.quantize(&self.encode(frame)?)?;
        self.decode(&q)
    }
}
