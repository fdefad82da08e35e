// Encodes frames to index grids with the desk-scale VQ autoencoder, decodes
// them back and checks the quantizer against a brute-force search.

use candle_core::Device;
use tokvid::data::Frame;
use tokvid::params::ParamStore;
use tokvid::vq::{nearest_indices, AutoencoderConfig, VqAutoencoder};

fn main() -> tokvid::Result<()> {
    let cfg = AutoencoderConfig::desk_scale();
    let store = ParamStore::new(0, &Device::Cpu);
    let ae = VqAutoencoder::new(&store, &cfg)?;
    println!(
        "{}x{} input, f={}, K={}, {} tokens per frame, {} parameters",
        cfg.input_size,
        cfg.input_size,
        cfg.compression_factor,
        cfg.codebook_size,
        cfg.tokens_per_frame(),
        store.num_params()
    );

    let frames: Vec<Frame> = (0..3)
        .map(|i| Frame::filled(cfg.input_size, cfg.input_size, -0.5 + 0.4 * i as f32))
        .collect::<tokvid::Result<_>>()?;
    let grids = ae.tokenize_frames(&frames)?;
    for (i, g) in grids.iter().enumerate() {
        println!("frame {i}: grid {:?}, indices {:?}", g.grid(), g.indices());
    }

    let x = Frame::batch(&frames, &Device::Cpu)?;
    let out = ae.forward(&x)?;
    println!("reconstruction {:?}", out.reconstruction.dims());
    let round = ae.decode(&ae.embed(&grids[0])?)?;
    println!("decoded frame 0: {}x{}", round.height(), round.width());

    // quantization is the nearest codebook row, ties to the lower index
    let rows: Vec<Vec<f32>> = ae.encode(&frames[1])?.values().to_vec2()?;
    let codebook: Vec<Vec<f32>> = ae.codebook().vectors().to_vec2()?;
    assert_eq!(nearest_indices(&rows, &codebook), grids[1].indices());
    Ok(())
}
