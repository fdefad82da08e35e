// Trains a miniature tokenizer, world model and video decoder on the
// synthetic corpus, generates 14 frames from 2 and scores generation across
// the top-k sweep. Sizes are tiny so the whole run takes seconds; the
// `desk-scale` preset is the same flow at a useful size.

use std::path::Path;

use tokvid::data::{PreprocessConfig, SynthSpec};
use tokvid::pipeline::{
    evaluate_generation, generate_video, top_k_sweep, validation_clips, GenerateRequest, GenerationEval, Pipeline,
    TOP_K_SWEEP,
};
use tokvid::train::{
    load_tokenizer, run, Preset, RunConfig, ScheduleConfig, Stage, TokenizerTrainer, TrainData, VideoDecoderTrainer,
    WorldModelTrainer,
};
use tokvid::vq::{AutoencoderConfig, DiscriminatorConfig, DiscriminatorVariant};
use tokvid::wm::{LoraConfig, StructureMode, WorldModelConfig};

pub fn miniature(stage: Stage, root: &Path) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::DeskScale, stage);
    cfg.autoencoder = AutoencoderConfig {
        input_size: 16,
        compression_factor: 4,
        codebook_size: 8,
        code_dim: 4,
        channels: vec![4, 4, 8],
        discriminator: DiscriminatorConfig { variant: DiscriminatorVariant::Baseline, base_channels: 2, max_channels: 4 },
    };
    cfg.batch_size = 2;
    cfg.validate_every = 0;
    cfg.schedule = ScheduleConfig { warmup_steps: 2, peak_lr: 5e-3, decay_steps: 10, final_lr: 5e-4, total_steps: 12 };
    cfg.data.synth = Some(SynthSpec { count: 10, width: 32, height: 32, frames: 40, seed: 1 });
    cfg.data.synth_dir = Some(root.join("synth"));
    cfg.data.preprocess = PreprocessConfig { scale: 0.5, crop: 16, target_fps: 4.0 };
    cfg.checkpoint.dir = root.join(stage.name());
    cfg.checkpoint.tokenizer = (stage != Stage::Tok).then(|| root.join("tok/final"));
    if let Some(f) = cfg.features.as_mut() {
        f.perceptual_widths = vec![4, 4];
        f.teacher_dim = 8;
    }
    if let Some(w) = cfg.loss.as_mut() {
        w.adversarial_start_step = 6;
    }
    if let Some(wm) = cfg.world_model.as_mut() {
        *wm = WorldModelConfig {
            image_vocab: 9,
            depth: 1,
            heads: 2,
            model_dim: 16,
            mlp_dim: 32,
            lora: Some(LoraConfig { rank: 2, alpha: 4.0 }),
            ..WorldModelConfig::desk_scale()
        };
    }
    cfg
}

fn main() -> tokvid::Result<()> {
    let root = tempfile::tempdir().expect("temporary directory");
    let root = root.path();

    let tok_cfg = miniature(Stage::Tok, root);
    let data = TrainData::load(&tok_cfg.data)?;
    let m = run(&mut TokenizerTrainer::new(tok_cfg, data.clone())?)?;
    println!("tokenizer: {} steps, content {}", m.step, m.content_hash);

    let (tok_store, tok) = load_tokenizer(&root.join("tok/final"), None)?;
    let m = run(&mut WorldModelTrainer::new(miniature(Stage::Wm, root), &tok, data.clone())?)?;
    println!("world model: {} steps, content {}", m.step, m.content_hash);
    let m = run(&mut VideoDecoderTrainer::new(miniature(Stage::Vdec, root), tok_store, data.clone())?)?;
    println!("video decoder: {} steps, content {}", m.step, m.content_hash);

    let p = Pipeline::load(&root.join("tok/final"), &root.join("wm/final"), &root.join("vdec/final"))?;
    let clip = &data.val.clips()[0];
    let req = GenerateRequest::new(clip.frames()[..2].to_vec(), 14, 5, 42);
    let out = root.join("generate");
    let g = generate_video(&p, &req, &out)?;
    println!("{} frames, {} repairs, manifest:\n{}", g.frame_paths.len(), g.manifest.repairs,
        std::fs::read_to_string(out.join("run.toml")).expect("manifest written"));

    let wm_cfg = miniature(Stage::Wm, root);
    let clips = validation_clips(&wm_cfg, &data)?;
    let opts = GenerationEval { top_k: 5, seed: 0, mode: StructureMode::Free };
    for r in evaluate_generation(&p, &clips, opts)? {
        println!("{} = {:.4}", r.label(), r.value);
    }
    print!("{}", top_k_sweep(&p, &clips, &TOP_K_SWEEP, 0).render());
    Ok(())
}
