//! Evaluation runs: transcoding quality of a tokenizer against its inputs,
//! and distributional quality of generated continuations.

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::losses::FeatureNet;
use crate::metrics::{
    cmmd, embed_frames, fid, fvd, lpips, mean_over_pairs, ms_ssim, psnr, ssim, MetricReport, MmdEstimator,
    PooledColorEmbedder, PooledMotionEmbedder, SsimConfig, VideoEmbedder, CMMD_SIGMA,
};
use crate::metrics::ImageEmbedder;
use crate::pipeline::generate::GenerateRequest;
use crate::pipeline::Pipeline;
use crate::train::FeatureConfig;
use crate::vq::VqAutoencoder;
use crate::wm::StructureMode;

const TRANSCODE_BATCH: usize = 16;

/// Standard SSIM constants with as many MS-SSIM scales as `size` pixels allow.
pub fn fitted_ssim(size: usize) -> SsimConfig {
    let window = SsimConfig::default().window;
    let scales = (1..=5).take_while(|s| window << (s - 1) <= size).last().unwrap_or(1);
    SsimConfig::with_scales(scales)
}

fn report(metric: &str, value: f64, samples: usize, extractor: &str) -> MetricReport {
    let mut r = MetricReport::new(metric, value);
    r.samples = samples;
    r.extractor = extractor.into();
    r
}

/// FID and CMMD over pooled frames; empty with fewer than two frames a side.
fn distribution_reports(a: &[Frame], b: &[Frame], frame_count: Option<usize>) -> Result<Vec<MetricReport>> {
    if a.len() < 2 || b.len() < 2 {
        log::warn!("distributional metrics need two samples per side, skipping");
        return Ok(Vec::new());
    }
    let emb = PooledColorEmbedder::default();
    let (fa, fb) = (embed_frames(a, &emb)?, embed_frames(b, &emb)?);
    let mut out = vec![
        report("FID", fid(&fa, &fb)?, a.len(), &emb.name()),
        report("CMMD", cmmd(&fa, &fb, CMMD_SIGMA, MmdEstimator::Unbiased)?, a.len(), &emb.name()),
    ];
    for r in &mut out {
        r.frame_count = frame_count;
    }
    Ok(out)
}

/// PSNR, SSIM, MS-SSIM, LPIPS, FID and CMMD of encode-quantize-decode
/// against the input frames.
pub fn evaluate_transcoding(tok: &VqAutoencoder, frames: &[Frame], features: &FeatureConfig) -> Result<Vec<MetricReport>> {
    if frames.is_empty() {
        return Err(Error::Parameter("no frames to evaluate".into()));
    }
    let mut recon = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(TRANSCODE_BATCH) {
        let x = Frame::batch(chunk, tok.device())?;
        recon.extend(Frame::unbatch(&tok.forward(&x)?.reconstruction.detach())?);
    }
    let n = frames.len();
    let ssim_cfg = fitted_ssim(tok.config().input_size);
    let phi = features.perceptual()?;
    let weights = vec![1.0 / phi.num_layers() as f64; phi.num_layers()];
    let mut out = vec![
        report("PSNR", mean_over_pairs(&recon, frames, psnr)?, n, "-"),
        report("SSIM", mean_over_pairs(&recon, frames, |a, b| ssim(a, b, &ssim_cfg))?, n, "-"),
        report(
            "MS-SSIM",
            mean_over_pairs(&recon, frames, |a, b| ms_ssim(a, b, &ssim_cfg))?,
            n,
            &format!("{}-scale", ssim_cfg.scale_weights.len()),
        ),
        report("LPIPS", lpips(&recon, frames, &phi, &weights)?, n, &phi.name()),
    ];
    out.extend(distribution_reports(&recon, frames, None)?);
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationEval {
    pub top_k: usize,
    pub seed: u64,
    pub mode: StructureMode,
}

/// Continues each reference clip from its first `T` frames and compares the
/// `N` predicted frames with the real ones: FID and CMMD over pooled
/// frames, FVD over clips, all subscripted with `N`. Clip `i` is sampled
/// with seed `seed + i`.
pub fn evaluate_generation(p: &Pipeline, clips: &[Vec<Frame>], opts: GenerationEval) -> Result<Vec<MetricReport>> {
    let (t, n) = (p.prediction().initial_frames, p.prediction().predicted_frames);
    if clips.len() < 2 {
        return Err(Error::Parameter(format!("generation metrics need two or more clips, got {}", clips.len())));
    }
    let mut fake = Vec::with_capacity(clips.len());
    let mut real = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        if clip.len() < t + n {
            return Err(Error::Dimension(format!("clip of {} frames, {} needed", clip.len(), t + n)));
        }
        let mut req = GenerateRequest::new(clip[..t].to_vec(), n, opts.top_k, opts.seed.wrapping_add(i as u64));
        req.mode = opts.mode;
        fake.push(p.generate(&req)?.frames);
        real.push(clip[t..t + n].to_vec());
    }
    let mut out = distribution_reports(&fake.concat(), &real.concat(), Some(n))?;
    let motion = PooledMotionEmbedder::default();
    let mut r = report("FVD", fvd(&fake, &real, &motion, n)?, clips.len(), &motion.name());
    r.frame_count = Some(n);
    out.push(r);
    for r in &mut out {
        r.top_k = Some(opts.top_k);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleMode;
    use crate::pipeline::testutil::{dirs, tiny_checkpoints};
    use crate::train::testutil::{tiny_config, tiny_data};
    use crate::train::Stage;

    #[test]
    fn fitted_scales() {
        assert_eq!(fitted_ssim(16).scale_weights.len(), 1);
        assert_eq!(fitted_ssim(64).scale_weights.len(), 3);
        assert_eq!(fitted_ssim(256).scale_weights.len(), 5);
        assert!((fitted_ssim(64).scale_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transcoding_reports_all_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Stage::Tok, dir.path());
        let store = crate::params::ParamStore::new(3, &candle_core::Device::Cpu);
        let tok = VqAutoencoder::new(&store, &cfg.autoencoder).unwrap();
        let frames: Vec<Frame> = tiny_data().val.clips()[0].frames().to_vec();
        let reports = evaluate_transcoding(&tok, &frames, cfg.features.as_ref().unwrap()).unwrap();
        let names: Vec<_> = reports.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(names, ["PSNR", "SSIM", "MS-SSIM", "LPIPS", "FID", "CMMD"]);
        assert!(reports.iter().all(|r| r.value.is_finite() && r.samples == frames.len()));
        // a single frame still yields the paired metrics
        assert_eq!(evaluate_transcoding(&tok, &frames[..1], cfg.features.as_ref().unwrap()).unwrap().len(), 4);
    }

    #[test]
    fn generation_reports_subscripted_metrics() {
        let root = tempfile::tempdir().unwrap();
        tiny_checkpoints(root.path());
        let [t, w, v] = dirs(root.path());
        let p = Pipeline::load(&t, &w, &v).unwrap();
        let data = tiny_data();
        let mode = SampleMode::Prediction { initial: 1, predicted: 2 };
        let clips: Vec<Vec<Frame>> = data
            .train
            .sample_refs(mode, 0)
            .into_iter()
            .take(3)
            .map(|r| data.train.get(r, mode).unwrap())
            .collect();
        let opts = GenerationEval { top_k: 4, seed: 1, mode: StructureMode::Free };
        let reports = evaluate_generation(&p, &clips, opts).unwrap();
        let labels: Vec<_> = reports.iter().map(|r| r.label()).collect();
        assert_eq!(labels, ["FID_2", "CMMD_2", "FVD_2"]);
        assert!(reports.iter().all(|r| r.top_k == Some(4)));
        assert_eq!(evaluate_generation(&p, &clips, opts).unwrap(), reports);
        assert!(evaluate_generation(&p, &clips[..1], opts).is_err());
    }
}
