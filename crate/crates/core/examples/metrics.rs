// Image and distribution metrics on toy data, written to a report file.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tokvid::data::Frame;
use tokvid::metrics::{
    cmmd, fid, fvd, parse_report, psnr, render_report, ssim, FeatureSet, MetricReport, MmdEstimator,
    PooledMotionEmbedder, SsimConfig, CMMD_SIGMA,
};

fn gaussian(n: usize, mean: f64, seed: u64) -> tokvid::Result<FeatureSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(mean, 1.0).expect("valid normal");
    FeatureSet::new("toy", (0..n).map(|_| vec![d.sample(&mut rng)]).collect())
}

fn main() -> tokvid::Result<()> {
    let a = Frame::filled(32, 32, 0.0)?;
    // two 8-bit levels brighter
    let b = Frame::filled(32, 32, 2.0 / 127.5)?;
    println!("PSNR identical {:.2} dB, offset by 2 levels {:.2} dB", psnr(&a, &a)?, psnr(&b, &a)?);
    println!("SSIM identical {:.4}", ssim(&a, &a, &SsimConfig::default())?);

    let (p, q) = (gaussian(10_000, 0.0, 1)?, gaussian(10_000, 1.0, 2)?);
    let fid_pq = fid(&p, &q)?;
    let cmmd_pq = cmmd(&p, &q, CMMD_SIGMA, MmdEstimator::Unbiased)?;
    println!("N(0,1) vs N(1,1): FID {fid_pq:.4}, CMMD {cmmd_pq:.6}");

    let clip = |v: f32| -> tokvid::Result<Vec<Frame>> { (0..4).map(|t| Frame::filled(8, 8, v * t as f32)).collect() };
    let real = vec![clip(0.1)?, clip(0.2)?, clip(0.3)?];
    let fake = vec![clip(0.0)?, clip(0.15)?, clip(0.25)?];
    let fvd4 = fvd(&fake, &real, &PooledMotionEmbedder::default(), 4)?;

    let mut reports = vec![MetricReport::new("FID", fid_pq), MetricReport::new("FVD", fvd4)];
    reports[1].frame_count = Some(4);
    reports[1].samples = 3;
    let text = render_report(&["toy distributions".into()], &reports);
    print!("{text}");
    assert_eq!(parse_report(&text)?, reports);
    Ok(())
}
