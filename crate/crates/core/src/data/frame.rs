//! Frame types and the resolution-streamlining transforms.
//!
//! Resampling uses bilinear interpolation with half-pixel centers
//! (`align_corners = false`) and no antialiasing prefilter: output pixel `o`
//! samples source coordinate `(o + 0.5) / scale - 0.5`, clamped to the image.
//! At a scale of exactly 0.5 this reduces to a 2×2 box average.

use candle_core::{Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

/// An 8-bit source frame as it comes off disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub image: RgbImage,
    pub source_id: String,
    pub timestamp_index: usize,
}

impl RawFrame {
    pub fn new(image: RgbImage, source_id: impl Into<String>, timestamp_index: usize) -> Result<Self> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::Dimension("raw frame must have non-zero size".into()));
        }
        Ok(Self {
            image,
            source_id: source_id.into(),
            timestamp_index,
        })
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }
}

/// A normalized image, HWC layout, values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "frame {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Dimension(format!("frame value {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// `[3, H, W]` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?)
    }

    /// Builds a frame from a `[3, H, W]` tensor, clamping into [-1, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t
            .to_dtype(candle_core::DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1()?;
        let data = data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Self::new(h, w, data)
    }

    /// Stacks frames into a `[B, 3, H, W]` batch.
    pub fn batch(frames: &[Frame], device: &Device) -> Result<Tensor> {
        let ts = frames
            .iter()
            .map(|f| f.to_tensor(device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    pub fn unbatch(t: &Tensor) -> Result<Vec<Frame>> {
        let b = t.dim(0)?;
        (0..b).map(|i| Frame::from_tensor(&t.get(i)?)).collect()
    }
}

/// Bilinear resampling of an 8-bit image into a float HWC buffer (0..=255 scale).
pub fn resize_bilinear(img: &RgbImage, out_h: usize, out_w: usize) -> Vec<f32> {
    let (in_w, in_h) = (img.width() as usize, img.height() as usize);
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let taps = |o: usize, scale: f64, n: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, in_w)).collect();
    let raw = img.as_raw();
    let px = |y: usize, x: usize, c: usize| raw[(y * in_w + x) * 3 + c] as f32;
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        let (y0, y1, fy) = taps(oy, sy, in_h);
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                let bot = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Downscale by `scale`, take the central `crop`×`crop` window and map
/// 0..=255 onto [-1, 1] via `v / 127.5 - 1`.
pub fn preprocess_image(raw: &RawFrame, scale: f64, crop: usize) -> Result<Frame> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    let sh = (raw.height() as f64 * scale).round() as usize;
    let sw = (raw.width() as f64 * scale).round() as usize;
    if sh < crop {
        return Err(Error::Dimension(format!(
            "height: scaled size {sh} is smaller than crop {crop}"
        )));
    }
    if sw < crop {
        return Err(Error::Dimension(format!(
            "width: scaled size {sw} is smaller than crop {crop}"
        )));
    }
    let scaled = resize_bilinear(&raw.image, sh, sw);
    let (top, left) = crop_origin(sh, sw, crop);
    let mut data = Vec::with_capacity(crop * crop * 3);
    for y in top..top + crop {
        let row = &scaled[(y * sw + left) * 3..(y * sw + left + crop) * 3];
        data.extend(row.iter().map(|v| (v / 127.5 - 1.0).clamp(-1.0, 1.0)));
    }
    Frame::new(crop, crop, data)
}

/// Top-left corner of a centered crop window.
pub fn crop_origin(h: usize, w: usize, crop: usize) -> (usize, usize) {
    ((h - crop) / 2, (w - crop) / 2)
}

/// Inverse normalization: `round(clamp(v, -1, 1) * 127.5 + 127.5)`.
pub fn denormalize(frame: &Frame) -> RgbImage {
    let buf = frame.data.iter().map(|&v| denormalize_value(v)).collect();
    RgbImage::from_raw(frame.width as u32, frame.height as u32, buf).expect("buffer matches frame size")
}

pub fn denormalize_value(v: f32) -> u8 {
    (v.clamp(-1.0, 1.0) * 127.5 + 127.5).round() as u8
}
