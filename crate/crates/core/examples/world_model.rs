// Frames index grids into a token sequence, counts the adapter parameters
// of the full-size backbone and samples a short continuation from the
// desk-scale world model.

use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokvid::params::ParamStore;
use tokvid::vq::IndexGrid;
use tokvid::wm::{
    frame_indices, frame_text_prompt, generate, ByteCodec, GenerationParams, StructureMode, WorldModel,
    WorldModelConfig, DEFAULT_PROMPT, END_OF_IMAGE,
};

fn main() -> tokvid::Result<()> {
    // 16 frames of 16x16 tokens: 16 * 257 entries, a marker closing each frame
    let grids: Vec<IndexGrid> = (0..16)
        .map(|f| IndexGrid::square((0..256).map(|i| ((i + f) % 1024) as u32).collect()))
        .collect::<tokvid::Result<_>>()?;
    let seq = frame_indices(&grids)?;
    let markers = seq.iter().filter(|&&t| t == END_OF_IMAGE).count();
    println!("framed length {} with {markers} end-of-image markers", seq.len());

    let full = WorldModelConfig::paper_scale().parameter_counts();
    println!(
        "full-size backbone: {} parameters, {:.3}% trainable",
        full.total,
        100.0 * full.fraction()
    );

    let cfg = WorldModelConfig::desk_scale();
    let store = ParamStore::new(0, &Device::Cpu);
    let model = WorldModel::new(&store, &cfg)?;
    let prompt = frame_text_prompt(DEFAULT_PROMPT, &ByteCodec)?;
    let initial: Vec<IndexGrid> = (0..2)
        .map(|f| IndexGrid::square((0..16).map(|i| ((i + f) % 16) as u32).collect()))
        .collect::<tokvid::Result<_>>()?;
    for k in [1, 5, cfg.image_vocab] {
        let params = GenerationParams { frames: 3, top_k: k, mode: StructureMode::Forced, use_cache: true };
        let out = generate(&model, &prompt, &initial, params, &mut ChaCha8Rng::seed_from_u64(1))?;
        println!(
            "top-k {k:>2}: {} iterations, first predicted grid {:?}",
            out.iterations,
            out.grids[0].indices()
        );
    }
    Ok(())
}
