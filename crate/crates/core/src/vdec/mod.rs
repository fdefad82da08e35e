//! Video decoder: the image decoder inflated to 3D, applied over 3-frame
//! windows of quantized latents, with a streaming front-end that emits frame
//! `t` as soon as grid `t + 1` arrives.
//!
//! Inflation copies each 2D kernel into the centre tap of a temporal kernel and
//! zeroes the other taps. Norm statistics stay per frame, so a freshly inflated
//! decoder reproduces the image decoder frame by frame for any window.

use std::collections::VecDeque;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::losses::{generator_loss, reconstruction_loss, FeatureNet, LossWeights};
use crate::nn::Dims;
use crate::params::ParamStore;
use crate::vq::{AutoencoderConfig, Codebook, Decoder, IndexGrid, PatchDiscriminator};

pub const WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InflationSpec {
    pub extent: usize,
}

impl Default for InflationSpec {
    fn default() -> Self {
        Self { extent: 3 }
    }
}

impl InflationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal extent {} has no centre tap",
                self.extent
            )));
        }
        Ok(())
    }

    fn dims(&self) -> Dims {
        Dims::Three {
            frames: WINDOW,
            extent: self.extent,
        }
    }
}

/// `[o, i, kh, kw]` to `[o, i, extent, kh, kw]` with the input at the centre.
pub fn inflate_kernel(weight: &Tensor, extent: usize) -> Result<Tensor> {
    let w = weight.unsqueeze(2)?;
    if extent == 1 {
        return Ok(w);
    }
    let zeros = w.zeros_like()?;
    let half = extent / 2;
    let mut taps = vec![zeros.clone(); half];
    taps.push(w);
    taps.extend(std::iter::repeat_n(zeros, half));
    Ok(Tensor::cat(&taps, 2)?)
}

/// Copies every parameter named `src_prefix.*` into `dst` as `dst_prefix.*`,
/// inflating 4D kernels. Returns the number of inflated kernels.
pub fn inflate_params(
    src: &ParamStore,
    src_prefix: &str,
    dst: &ParamStore,
    dst_prefix: &str,
    spec: InflationSpec,
) -> Result<usize> {
    spec.validate()?;
    let lead = format!("{src_prefix}.");
    let mut inflated = 0;
    for (name, var) in src.named() {
        let Some(rest) = name.strip_prefix(&lead) else {
            continue;
        };
        let value = var.as_tensor().detach();
        let value = if value.rank() == 4 && rest.ends_with("weight") {
            inflated += 1;
            inflate_kernel(&value, spec.extent)?
        } else {
            value.copy()?
        };
        dst.insert(&format!("{dst_prefix}.{rest}"), &value)?;
    }
    if inflated == 0 {
        return Err(Error::Config(format!("no kernels found under {src_prefix}")));
    }
    Ok(inflated)
}

/// Three consecutive grids `(t - 1, t, t + 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalWindow([IndexGrid; WINDOW]);

impl TemporalWindow {
    pub fn new(grids: Vec<IndexGrid>) -> Result<Self> {
        let len = grids.len();
        let arr: [IndexGrid; WINDOW] = grids
            .try_into()
            .map_err(|_| Error::Dimension(format!("temporal window needs {WINDOW} grids, got {len}")))?;
        if arr.iter().any(|g| g.grid() != arr[0].grid()) {
            return Err(Error::Dimension("window grids differ in shape".into()));
        }
        Ok(Self(arr))
    }

    pub fn grids(&self) -> &[IndexGrid; WINDOW] {
        &self.0
    }

    pub fn center(&self) -> &IndexGrid {
        &self.0[1]
    }
}

/// The inflated decoder plus a frozen copy of the tokenizer's codebook.
#[derive(Debug, Clone)]
pub struct VideoDecoder {
    cfg: AutoencoderConfig,
    spec: InflationSpec,
    codebook: Codebook,
    decoder: Decoder,
    device: Device,
}

impl VideoDecoder {
    /// Builds a fresh video decoder in `dst` from a trained autoencoder's
    /// parameters (`decoder.*`, `codebook.*`) in `src`.
    pub fn inflate(
        src: &ParamStore,
        dst: &ParamStore,
        cfg: &AutoencoderConfig,
        spec: InflationSpec,
    ) -> Result<Self> {
        inflate_params(src, "decoder", dst, "decoder", spec)?;
        for (name, var) in src.named() {
            if name.starts_with("codebook.") {
                dst.insert(&name, &var.as_tensor().detach().copy()?)?;
            }
        }
        Self::new(dst, cfg, spec)
    }

    /// Binds to parameters already present in `store` (e.g. a checkpoint).
    pub fn new(store: &ParamStore, cfg: &AutoencoderConfig, spec: InflationSpec) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let root = store.root();
        let codebook = Codebook::new(&root.pp("codebook"), cfg.codebook_size, cfg.code_dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            spec,
            codebook: Codebook::from_tensor(codebook.vectors().detach())?,
            decoder: Decoder::new(&root.pp("decoder"), cfg, spec.dims())?,
            device: store.device().clone(),
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn spec(&self) -> InflationSpec {
        self.spec
    }

    /// Only decoder parameters train; the codebook copy is frozen.
    pub fn is_trainable(name: &str) -> bool {
        name.starts_with("decoder.")
    }

    /// Codebook rows for each window, folded to `[B*3, d, h, w]`.
    pub fn embed_windows(&self, windows: &[TemporalWindow]) -> Result<Tensor> {
        let (gh, gw) = windows
            .first()
            .ok_or_else(|| Error::Dimension("no windows to decode".into()))?
            .center()
            .grid();
        let g = self.cfg.grid_side();
        if (gh, gw) != (g, g) {
            return Err(Error::Dimension(format!(
                "grid {gh}x{gw} does not match the {g}x{g} latent grid"
            )));
        }
        let mut idx = Vec::with_capacity(windows.len() * WINDOW * gh * gw);
        for w in windows {
            for grid in w.grids() {
                if grid.grid() != (gh, gw) {
                    return Err(Error::Dimension("windows differ in grid shape".into()));
                }
                grid.check_range(self.cfg.codebook_size)?;
                idx.extend_from_slice(grid.indices());
            }
        }
        let rows = self.codebook.lookup(&idx)?;
        let n = windows.len() * WINDOW;
        Ok(rows
            .reshape((n, gh, gw, self.cfg.code_dim))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// Folded latents `[B*3, d, h, w]` to folded frames `[B*3, 3, H, W]`.
    pub fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        let (n, d, h, w) = z.dims4()?;
        let g = self.cfg.grid_side();
        if n % WINDOW != 0 || (d, h, w) != (self.cfg.code_dim, g, g) {
            return Err(Error::Dimension(format!(
                "expected [B*{WINDOW}, {}, {g}, {g}] latents, got {:?}",
                self.cfg.code_dim,
                z.dims()
            )));
        }
        self.decoder.forward(z)
    }

    pub fn decode_windows(&self, windows: &[TemporalWindow]) -> Result<Vec<[Frame; WINDOW]>> {
        let y = self.decode_latents(&self.embed_windows(windows)?)?;
        let frames = Frame::unbatch(&y)?;
        Ok(frames
            .chunks_exact(WINDOW)
            .map(|c| [c[0].clone(), c[1].clone(), c[2].clone()])
            .collect())
    }

    pub fn decode_window(&self, window: &TemporalWindow) -> Result<[Frame; WINDOW]> {
        let mut out = self.decode_windows(std::slice::from_ref(window))?;
        Ok(out.pop().expect("one window"))
    }

    pub fn device(&self) -> &Device {
        &self.device
    }
}

/// Incremental decoder holding at most the previous and current grid.
///
/// Frame `t` is returned by the `push` of grid `t + 1`; the last frame by
/// [`StreamDecoder::finish`]. Boundary windows replicate the first or last
/// grid.
pub struct StreamDecoder<'a> {
    vdec: &'a VideoDecoder,
    ring: VecDeque<IndexGrid>,
    consumed: usize,
    emitted: usize,
}

impl<'a> StreamDecoder<'a> {
    pub fn new(vdec: &'a VideoDecoder) -> Self {
        Self {
            vdec,
            ring: VecDeque::with_capacity(WINDOW),
            consumed: 0,
            emitted: 0,
        }
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    fn emit(&mut self, window: Vec<IndexGrid>) -> Result<Frame> {
        let [_, center, _] = self.vdec.decode_window(&TemporalWindow::new(window)?)?;
        self.emitted += 1;
        Ok(center)
    }

    pub fn push(&mut self, grid: IndexGrid) -> Result<Option<Frame>> {
        self.consumed += 1;
        self.ring.push_back(grid);
        match self.ring.len() {
            1 => Ok(None),
            2 => {
                let w = vec![self.ring[0].clone(), self.ring[0].clone(), self.ring[1].clone()];
                self.emit(w).map(Some)
            }
            _ => {
                let w: Vec<IndexGrid> = self.ring.iter().cloned().collect();
                self.ring.pop_front();
                self.emit(w).map(Some)
            }
        }
    }

    /// Emits the final frame; `None` if nothing was pushed.
    pub fn finish(mut self) -> Result<Option<Frame>> {
        let n = self.ring.len();
        if n == 0 {
            return Ok(None);
        }
        let last = self.ring[n - 1].clone();
        let prev = self.ring[n.saturating_sub(2)].clone();
        self.emit(vec![prev, last.clone(), last]).map(Some)
    }
}

/// Decodes every grid, one output frame per input grid.
pub fn stream_decode(vdec: &VideoDecoder, grids: &[IndexGrid]) -> Result<Vec<Frame>> {
    let mut dec = StreamDecoder::new(vdec);
    let mut out = Vec::with_capacity(grids.len());
    for g in grids {
        out.extend(dec.push(g.clone())?);
    }
    out.extend(dec.finish()?);
    Ok(out)
}

/// Boundary-replicated windows centred on each grid.
pub fn windows_for(grids: &[IndexGrid]) -> Result<Vec<TemporalWindow>> {
    let n = grids.len();
    (0..n)
        .map(|t| {
            TemporalWindow::new(vec![
                grids[t.saturating_sub(1)].clone(),
                grids[t].clone(),
                grids[(t + 1).min(n - 1)].clone(),
            ])
        })
        .collect()
}

/// 3D discriminator inflated from the 2D one stored under `src_prefix`.
pub fn inflate_discriminator(
    src: &ParamStore,
    src_prefix: &str,
    dst: &ParamStore,
    dst_prefix: &str,
    cfg: &AutoencoderConfig,
    spec: InflationSpec,
) -> Result<PatchDiscriminator> {
    inflate_params(src, src_prefix, dst, dst_prefix, spec)?;
    discriminator_3d(dst, dst_prefix, cfg, spec)
}

pub fn discriminator_3d(
    store: &ParamStore,
    prefix: &str,
    cfg: &AutoencoderConfig,
    spec: InflationSpec,
) -> Result<PatchDiscriminator> {
    PatchDiscriminator::new(&store.root().pp(prefix), &cfg.discriminator, cfg.input_size, spec.dims())
}

/// Sum over the three window positions of the reconstruction loss plus the
/// gated generator term on the 3D discriminator's logits. Inputs are folded
/// `[B*3, 3, H, W]`.
pub fn vdec_loss(
    x_hat: &Tensor,
    x: &Tensor,
    w: &LossWeights,
    phi: Option<&dyn FeatureNet>,
    fake_logits: Option<&Tensor>,
    step: u64,
) -> Result<Tensor> {
    if x_hat.dims() != x.dims() {
        return Err(Error::Dimension(format!(
            "video decoder loss: {:?} vs {:?}",
            x_hat.dims(),
            x.dims()
        )));
    }
    let (n, c, h, wd) = x.dims4()?;
    if n % WINDOW != 0 {
        return Err(Error::Dimension(format!("{n} frames do not form windows of {WINDOW}")));
    }
    let xh = x_hat.reshape((n / WINDOW, WINDOW, c, h, wd))?;
    let xr = x.reshape((n / WINDOW, WINDOW, c, h, wd))?;
    let mut total: Option<Tensor> = None;
    for tau in 0..WINDOW {
        let a = xh.narrow(1, tau, 1)?.squeeze(1)?;
        let b = xr.narrow(1, tau, 1)?.squeeze(1)?;
        let term = reconstruction_loss(&a, &b, w, phi)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    let mut total = total.expect("window is non-empty");
    if w.adversarial_active(step) {
        let logits = fake_logits.ok_or_else(|| {
            Error::Config("adversarial term active but no discriminator logits given".into())
        })?;
        total = (total + (generator_loss(logits)? * w.generator)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vq::VqAutoencoder;
    use candle_core::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, ParamStore, VqAutoencoder, VideoDecoder) {
        let cfg = AutoencoderConfig::desk_scale();
        let src = ParamStore::new(5, &Device::Cpu);
        let ae = VqAutoencoder::new(&src, &cfg).unwrap();
        let dst = ParamStore::new(6, &Device::Cpu);
        let vdec = VideoDecoder::inflate(&src, &dst, &cfg, InflationSpec::default()).unwrap();
        (src, dst, ae, vdec)
    }

    fn random_grid(rng: &mut ChaCha8Rng, k: usize, side: usize) -> IndexGrid {
        IndexGrid::square((0..side * side).map(|_| rng.random_range(0..k as u32)).collect()).unwrap()
    }

    #[test]
    fn kernel_inflation_layout() {
        let w = Tensor::new(&[[[[2f32]]]], &Device::Cpu).unwrap();
        let k = inflate_kernel(&w, 3).unwrap();
        assert_eq!(k.dims(), &[1, 1, 3, 1, 1]);
        assert_eq!(k.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0., 2., 0.]);
        assert!(InflationSpec { extent: 2 }.validate().is_err());
    }

    #[test]
    fn parameter_counts_scale_kernels_only() {
        let (src, dst, _, _) = setup();
        let count = |s: &ParamStore, kernels: bool| -> usize {
            s.named()
                .iter()
                .filter(|(n, v)| n.starts_with("decoder.") && (v.rank() >= 4) == kernels)
                .map(|(_, v)| v.elem_count())
                .sum()
        };
        assert_eq!(count(&dst, true), 3 * count(&src, true));
        assert_eq!(count(&dst, false), count(&src, false));
    }

    #[test]
    fn center_frame_matches_image_decoder() {
        let (_s, _d, ae, vdec) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = ae.config().grid_side();
        for _ in 0..3 {
            let grids: Vec<_> = (0..3).map(|_| random_grid(&mut rng, 16, g)).collect();
            let [_, center, _] = vdec.decode_window(&TemporalWindow::new(grids.clone()).unwrap()).unwrap();
            let reference = ae.decode(&ae.embed(&grids[1]).unwrap()).unwrap();
            let diff = center
                .data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0f32, f32::max);
            assert!(diff <= 1e-5, "{diff}");
        }
    }

    #[test]
    fn stream_matches_batch_and_has_one_grid_latency() {
        let (_s, _d, ae, vdec) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ae.config().grid_side();
        let grids: Vec<_> = (0..5).map(|_| random_grid(&mut rng, 16, g)).collect();
        let mut dec = StreamDecoder::new(&vdec);
        let mut streamed = Vec::new();
        for (t, grid) in grids.iter().enumerate() {
            let out = dec.push(grid.clone()).unwrap();
            assert_eq!(out.is_some(), t >= 1);
            assert_eq!(dec.emitted(), t);
            streamed.extend(out);
        }
        streamed.extend(dec.finish().unwrap());
        assert_eq!(streamed.len(), 5);
        let batch = vdec.decode_windows(&windows_for(&grids).unwrap()).unwrap();
        for t in 1..4 {
            assert_eq!(streamed[t], batch[t][1]);
        }
    }

    #[test]
    fn discriminator_inflation_on_constant_input() {
        let cfg = AutoencoderConfig::desk_scale();
        let src = ParamStore::new(8, &Device::Cpu);
        let d2 = PatchDiscriminator::for_autoencoder(&src.root().pp("disc"), &cfg).unwrap();
        let dst = ParamStore::new(9, &Device::Cpu);
        let d3 = inflate_discriminator(&src, "disc", &dst, "disc3", &cfg, InflationSpec::default()).unwrap();
        let s = cfg.input_size;
        let frame = Tensor::randn(0f32, 0.5, (1, 3, s, s), &Device::Cpu).unwrap();
        let triple = frame.repeat((3, 1, 1, 1)).unwrap();
        let a = d2.forward(&frame).unwrap();
        let b = d3.forward(&triple).unwrap().narrow(0, 1, 1).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff <= 1e-5);
    }

    #[test]
    fn loss_terms() {
        let dev = Device::Cpu;
        let w = LossWeights {
            perceptual: 0.0,
            adversarial_start_step: 2_000,
            ..LossWeights::proposed()
        };
        let x = Tensor::randn(0f32, 0.5, (6, 3, 4, 4), &dev).unwrap();
        let zero_logits = Tensor::zeros((6, 1, 2, 2), DType::F32, &dev).unwrap();
        let v = vdec_loss(&x, &x, &w, None, Some(&zero_logits), 5_000).unwrap();
        assert_eq!(v.to_scalar::<f32>().unwrap(), 0.0);
        let y = Tensor::randn(0f32, 0.5, (6, 3, 4, 4), &dev).unwrap();
        let got = vdec_loss(&y, &x, &w, None, None, 0).unwrap().to_scalar::<f32>().unwrap();
        let (yr, xr) = (y.reshape((2, 3, 3, 4, 4)).unwrap(), x.reshape((2, 3, 3, 4, 4)).unwrap());
        let mut expect = 0f32;
        for t in 0..3 {
            let a = yr.narrow(1, t, 1).unwrap().squeeze(1).unwrap();
            let b = xr.narrow(1, t, 1).unwrap().squeeze(1).unwrap();
            expect += reconstruction_loss(&a, &b, &w, None).unwrap().to_scalar::<f32>().unwrap();
        }
        assert!((got - expect).abs() < 1e-6);
        assert!(vdec_loss(&y, &x, &w, None, None, 2_000).is_err());
    }
}
