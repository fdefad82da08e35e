//! Evaluation metrics. Image metrics compare paired frames; distributional
//! metrics compare embedding sets from pluggable extractors.

pub mod distribution;
pub mod image;
pub mod report;

pub use distribution::{
    cmmd, embed_clips, embed_frames, fid, fvd, FeatureSet, ImageEmbedder, MmdEstimator,
    PooledColorEmbedder, PooledMotionEmbedder, VideoEmbedder, CMMD_SIGMA,
};
pub use image::{lpips, mean_over_pairs, ms_ssim, psnr, psnr_from_mse, ssim, SsimConfig, PSNR_CAP};
pub use report::{parse_report, render_report, write_report, MetricReport};
