//! Reference-based image metrics: PSNR, SSIM, MS-SSIM and LPIPS.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{denormalize_value, Frame};
use crate::error::{Error, Result};
use crate::losses::FeatureNet;

pub const PSNR_CAP: f64 = 99.0;

fn check_pair(a: &Frame, b: &Frame) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Dimension(format!(
            "frames differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// PSNR in dB on the 8-bit values, capped at 99 dB.
pub fn psnr(x_hat: &Frame, x: &Frame) -> Result<f64> {
    check_pair(x_hat, x)?;
    let sq: f64 = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| {
            let d = denormalize_value(a) as f64 - denormalize_value(b) as f64;
            d * d
        })
        .sum();
    let mse = sq / x.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP)
}

/// Mean of a per-item metric over paired batches.
pub fn mean_over_pairs(
    x_hat: &[Frame],
    x: &[Frame],
    metric: impl Fn(&Frame, &Frame) -> Result<f64>,
) -> Result<f64> {
    if x_hat.len() != x.len() || x.is_empty() {
        return Err(Error::Dimension(format!(
            "paired metric over {} and {} frames",
            x_hat.len(),
            x.len()
        )));
    }
    let mut sum = 0.0;
    for (a, b) in x_hat.iter().zip(x) {
        sum += metric(a, b)?;
    }
    Ok(sum / x.len() as f64)
}

/// Constants of the windowed structural similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the inputs; 2 for values in [-1, 1].
    pub data_range: f64,
    /// Per-scale exponents of MS-SSIM; their count is the number of scales.
    pub scale_weights: Vec<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 2.0,
            scale_weights: vec![0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
        }
    }
}

impl SsimConfig {
    /// The first `scales` standard weights, renormalized to sum to one.
    pub fn with_scales(scales: usize) -> Self {
        let mut cfg = Self::default();
        cfg.scale_weights.truncate(scales.max(1));
        let s: f64 = cfg.scale_weights.iter().sum();
        for w in &mut cfg.scale_weights {
            *w /= s;
        }
        cfg
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let k: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Single-channel image, row-major.
#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channels(f: &Frame) -> [Plane; 3] {
        let (h, w) = (f.height(), f.width());
        let get = |c: usize| Plane {
            h,
            w,
            v: (0..h * w).map(|i| f.data()[i * 3 + c] as f64).collect(),
        };
        [get(0), get(1), get(2)]
    }

    fn mul(&self, o: &Plane) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect(),
        }
    }

    /// Separable valid-mode filtering.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let ow = self.w + 1 - n;
        let oh = self.h + 1 - n;
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                rows[y * ow + x] = (0..n).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.v[yy * self.w + xx];
                v[y * w + x] =
                    0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
            }
        }
        Plane { h, w, v }
    }
}

/// Mean luminance-contrast-structure product and mean contrast-structure term.
fn ssim_terms(a: &Plane, b: &Plane, cfg: &SsimConfig) -> (f64, f64) {
    let k = cfg.kernel();
    let mu_a = a.filter(&k);
    let mu_b = b.filter(&k);
    let saa = a.mul(a).filter(&k);
    let sbb = b.mul(b).filter(&k);
    let sab = a.mul(b).filter(&k);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let n = mu_a.v.len();
    let (mut full, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = saa.v[i] - ma * ma;
        let vb = sbb.v[i] - mb * mb;
        let cov = sab.v[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        full += l * c;
        cs += c;
    }
    (full / n as f64, cs / n as f64)
}

fn check_size(f: &Frame, cfg: &SsimConfig, scales: usize) -> Result<()> {
    let min = f.height().min(f.width());
    let needed = cfg.window << (scales - 1);
    if min < needed {
        return Err(Error::Dimension(format!(
            "{min}px image too small for {scales} scale(s) with an {}-tap window (needs {needed})",
            cfg.window
        )));
    }
    Ok(())
}

/// Gaussian-windowed SSIM over valid windows, averaged over channels.
pub fn ssim(x_hat: &Frame, x: &Frame, cfg: &SsimConfig) -> Result<f64> {
    check_pair(x_hat, x)?;
    check_size(x, cfg, 1)?;
    let (a, b) = (Plane::channels(x_hat), Plane::channels(x));
    Ok((0..3).map(|c| ssim_terms(&a[c], &b[c], cfg).0).sum::<f64>() / 3.0)
}

/// Multi-scale SSIM: contrast-structure at every scale, luminance at the
/// coarsest, combined with the configured exponents. Negative per-scale
/// terms are clipped at zero before exponentiation.
pub fn ms_ssim(x_hat: &Frame, x: &Frame, cfg: &SsimConfig) -> Result<f64> {
    check_pair(x_hat, x)?;
    let scales = cfg.scale_weights.len();
    if scales == 0 {
        return Err(Error::Config("MS-SSIM needs at least one scale".into()));
    }
    check_size(x, cfg, scales)?;
    let (mut a, mut b) = (Plane::channels(x_hat), Plane::channels(x));
    let mut total = 0.0;
    for c in 0..3 {
        let mut value = 1.0;
        for (s, &weight) in cfg.scale_weights.iter().enumerate() {
            let (full, cs) = ssim_terms(&a[c], &b[c], cfg);
            let term = if s + 1 == scales { full } else { cs };
            value *= term.max(0.0).powf(weight);
            if s + 1 < scales {
                a[c] = a[c].downsample();
                b[c] = b[c].downsample();
            }
        }
        total += value;
    }
    Ok(total / 3.0)
}

/// Weighted per-layer distances between channel-normalized activations:
/// `sum_l w_l * mean_{y,x} |f_l(a)/|f_l(a)| - f_l(b)/|f_l(b)||^2`, per item
/// then averaged over the batch.
pub fn lpips(x_hat: &[Frame], x: &[Frame], phi: &dyn FeatureNet, layer_weights: &[f64]) -> Result<f64> {
    if layer_weights.len() != phi.num_layers() {
        return Err(Error::Config(format!(
            "{} layer weights for {} layers of {}",
            layer_weights.len(),
            phi.num_layers(),
            phi.name()
        )));
    }
    if x_hat.len() != x.len() || x.is_empty() {
        return Err(Error::Dimension("LPIPS needs equally many non-zero frames".into()));
    }
    let dev = Device::Cpu;
    let fa = phi.features(&Frame::batch(x_hat, &dev)?)?;
    let fb = phi.features(&Frame::batch(x, &dev)?)?;
    let mut total = 0.0;
    for ((a, b), &w) in fa.iter().zip(&fb).zip(layer_weights) {
        let norm = |t: &Tensor| -> Result<Tensor> {
            let n = (t.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
            Ok(t.broadcast_div(&n)?)
        };
        let d = (norm(a)? - norm(b)?)?.sqr()?.sum(1)?;
        let per_item = d.flatten_from(1)?.mean(1)?.to_dtype(candle_core::DType::F64)?;
        let v: Vec<f64> = per_item.to_vec1()?;
        total += w * v.iter().sum::<f64>() / v.len() as f64;
    }
    Ok(total)
}
