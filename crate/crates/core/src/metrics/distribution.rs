//! Distributional metrics over learned embeddings: FID, CMMD and FVD.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Frame;
use crate::error::{Error, Result};

/// Embeddings of a sample set from one named extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    extractor: String,
    rows: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(extractor: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.len();
            if d == 0 || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Dimension("feature rows must share a non-zero dimension".into()));
            }
        }
        Ok(Self {
            extractor: extractor.into(),
            rows,
        })
    }

    pub fn extractor(&self) -> &str {
        &self.extractor
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map(Vec::len).unwrap_or(0)
    }
}

fn check_sets(a: &FeatureSet, b: &FeatureSet, what: &str) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Dimension(format!(
            "{what} needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "{what}: feature dims {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn moments(set: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (set.len(), set.dim());
    let m = DMatrix::from_row_iterator(n, d, set.rows().iter().flatten().copied());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to the two sets. The trace of
/// `(S_a S_b)^(1/2)` is taken as `tr((A S_b A)^(1/2))` with `A = S_a^(1/2)`,
/// symmetric throughout; negative eigenvalues are clipped to zero.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_sets(a, b, "FID")?;
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let root_a = sqrt_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = (mu_a - mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmdEstimator {
    #[default]
    Unbiased,
    Biased,
}

/// Bandwidth used by the CLIP-embedding MMD convention.
pub const CMMD_SIGMA: f64 = 10.0;

fn gaussian(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn mean_kernel(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64, skip_diagonal: bool) -> f64 {
    let partial: Vec<(f64, usize)> = x
        .par_iter()
        .enumerate()
        .map(|(i, xi)| {
            let mut s = 0.0;
            let mut c = 0;
            for (j, yj) in y.iter().enumerate() {
                if skip_diagonal && i == j {
                    continue;
                }
                s += gaussian(xi, yj, sigma);
                c += 1;
            }
            (s, c)
        })
        .collect();
    // fixed summation order
    let (s, c) = partial.iter().fold((0.0, 0), |(s, c), (ps, pc)| (s + ps, c + pc));
    s / c as f64
}

/// Squared MMD with a Gaussian kernel of bandwidth `sigma`.
pub fn cmmd(a: &FeatureSet, b: &FeatureSet, sigma: f64, estimator: MmdEstimator) -> Result<f64> {
    check_sets(a, b, "CMMD")?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("kernel bandwidth {sigma} must be positive")));
    }
    let unbiased = estimator == MmdEstimator::Unbiased;
    let kxx = mean_kernel(a.rows(), a.rows(), sigma, unbiased);
    let kyy = mean_kernel(b.rows(), b.rows(), sigma, unbiased);
    let kxy = mean_kernel(a.rows(), b.rows(), sigma, false);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Per-image embedding plugin.
pub trait ImageEmbedder: Send + Sync {
    fn name(&self) -> String;
    fn embed(&self, frame: &Frame) -> Result<Vec<f64>>;
}

/// Per-clip embedding plugin.
pub trait VideoEmbedder: Send + Sync {
    fn name(&self) -> String;
    fn embed(&self, clip: &[Frame]) -> Result<Vec<f64>>;
}

/// Embeds every frame in parallel, preserving input order.
pub fn embed_frames(frames: &[Frame], embedder: &dyn ImageEmbedder) -> Result<FeatureSet> {
    let rows = frames.par_iter().map(|f| embedder.embed(f)).collect::<Result<Vec<_>>>()?;
    FeatureSet::new(embedder.name(), rows)
}

/// Clips truncated to their first `frame_count` frames, then embedded.
pub fn embed_clips(clips: &[Vec<Frame>], embedder: &dyn VideoEmbedder, frame_count: usize) -> Result<FeatureSet> {
    let rows = clips
        .par_iter()
        .map(|c| {
            if c.len() < frame_count {
                return Err(Error::Dimension(format!(
                    "clip of {} frames is shorter than {frame_count}",
                    c.len()
                )));
            }
            embedder.embed(&c[..frame_count])
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureSet::new(format!("{}@{frame_count}", embedder.name()), rows)
}

/// Fréchet video distance over clip embeddings of the first `frame_count` frames.
pub fn fvd(a: &[Vec<Frame>], b: &[Vec<Frame>], embedder: &dyn VideoEmbedder, frame_count: usize) -> Result<f64> {
    fid(&embed_clips(a, embedder, frame_count)?, &embed_clips(b, embedder, frame_count)?)
}

/// Average-pools each channel onto a `cells x cells` grid.
#[derive(Debug, Clone, Copy)]
pub struct PooledColorEmbedder {
    pub cells: usize,
}

impl Default for PooledColorEmbedder {
    fn default() -> Self {
        Self { cells: 4 }
    }
}

fn pooled(frame: &Frame, cells: usize) -> Result<Vec<f64>> {
    let (h, w) = (frame.height(), frame.width());
    if cells == 0 || h < cells || w < cells {
        return Err(Error::Dimension(format!("cannot pool {h}x{w} onto {cells}x{cells}")));
    }
    let mut out = vec![0.0; cells * cells * 3];
    let mut counts = vec![0usize; cells * cells];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * cells / h) * cells + x * cells / w;
            counts[cell] += 1;
            for c in 0..3 {
                out[cell * 3 + c] += frame.at(y, x, c) as f64;
            }
        }
    }
    for (i, v) in out.iter_mut().enumerate() {
        *v /= counts[i / 3] as f64;
    }
    Ok(out)
}

impl ImageEmbedder for PooledColorEmbedder {
    fn name(&self) -> String {
        format!("pooled-color-{}", self.cells)
    }

    fn embed(&self, frame: &Frame) -> Result<Vec<f64>> {
        pooled(frame, self.cells)
    }
}

/// Mean pooled appearance plus mean absolute frame-to-frame change.
#[derive(Debug, Clone, Copy)]
pub struct PooledMotionEmbedder {
    pub cells: usize,
}

impl Default for PooledMotionEmbedder {
    fn default() -> Self {
        Self { cells: 4 }
    }
}

impl VideoEmbedder for PooledMotionEmbedder {
    fn name(&self) -> String {
        format!("pooled-motion-{}", self.cells)
    }

    fn embed(&self, clip: &[Frame]) -> Result<Vec<f64>> {
        if clip.is_empty() {
            return Err(Error::Dimension("empty clip".into()));
        }
        let per: Vec<Vec<f64>> = clip.iter().map(|f| pooled(f, self.cells)).collect::<Result<_>>()?;
        let d = per[0].len();
        let mut appearance = vec![0.0; d];
        let mut motion = vec![0.0; d];
        for (t, p) in per.iter().enumerate() {
            for i in 0..d {
                appearance[i] += p[i] / per.len() as f64;
                if t > 0 {
                    motion[i] += (p[i] - per[t - 1][i]).abs() / (per.len() - 1) as f64;
                }
            }
        }
        appearance.extend(motion);
        Ok(appearance)
    }
}
