// Inflates a 2D image decoder into the 3-frame video decoder, checks that
// the fresh inflation reproduces the 2D output on the centre frame and
// streams a short clip through it.

use candle_core::Device;
use tokvid::params::ParamStore;
use tokvid::vdec::{stream_decode, windows_for, InflationSpec, VideoDecoder};
use tokvid::vq::{AutoencoderConfig, IndexGrid, VqAutoencoder};

fn main() -> tokvid::Result<()> {
    let cfg = AutoencoderConfig::desk_scale();
    let tok_store = ParamStore::new(3, &Device::Cpu);
    let tok = VqAutoencoder::new(&tok_store, &cfg)?;
    let vdec_store = ParamStore::new(4, &Device::Cpu);
    let vdec = VideoDecoder::inflate(&tok_store, &vdec_store, &cfg, InflationSpec::default())?;
    println!("2D decoder + codebook: {} params, inflated: {}", tok_store.num_params(), vdec_store.num_params());

    let n = cfg.tokens_per_frame();
    let grids: Vec<IndexGrid> = (0..5)
        .map(|t| IndexGrid::square((0..n).map(|i| ((i * 3 + t) % cfg.codebook_size) as u32).collect()))
        .collect::<tokvid::Result<_>>()?;

    let windows = windows_for(&grids)?;
    let [_, centre, _] = vdec.decode_window(&windows[2])?;
    let image = tok.decode(&tok.embed(&grids[2])?)?;
    let gap = centre
        .data()
        .iter()
        .zip(image.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);
    println!("centre frame vs 2D decode: max |diff| = {gap:.2e}");

    let clip = stream_decode(&vdec, &grids)?;
    println!("streamed {} grids into {} frames of {}x{}", grids.len(), clip.len(), clip[0].height(), clip[0].width());
    Ok(())
}
