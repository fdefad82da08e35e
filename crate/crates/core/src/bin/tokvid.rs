use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tokvid::data::{preprocess_corpus, write_synthetic_corpus, DatasetManifest, SynthSpec};
use tokvid::metrics::write_report;
use tokvid::pipeline::{
    evaluate_generation, evaluate_transcoding, generate_video, load_input_frames, run_sweep, validation_clips,
    validation_frames, GenerateRequest, GenerationEval, Pipeline, SweepAxis, TOP_K_SWEEP,
};
use tokvid::train::{
    load_tokenizer, train_tokenizer, train_video_decoder, train_world_model, Preset, RunConfig, Stage, TrainData,
};
use tokvid::wm::StructureMode;
use tokvid::{Error, Result};

#[derive(Parser)]
#[command(name = "tokvid", version, about = "Tokenizer, world model and video decoder for token-based video generation")]
struct Cli {
    /// Run configuration file; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk-scale")]
    preset: Preset,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (checkpoints, frames or reports).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Corpus manifest to preprocess.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write a synthetic moving-square corpus instead.
    #[arg(long, num_args = 5, value_names = ["COUNT", "WIDTH", "HEIGHT", "FRAMES", "SEED"])]
    synth: Option<Vec<u64>>,
}

#[derive(Args)]
struct Train {
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Tokenizer checkpoint for the wm and vdec stages.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Training corpus manifest, replacing the configured data source.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct Checkpoints {
    #[arg(long, default_value = "runs/tok/final")]
    tokenizer: PathBuf,
    #[arg(long, default_value = "runs/wm/final")]
    world_model: PathBuf,
    #[arg(long, default_value = "runs/vdec/final")]
    video_decoder: PathBuf,
}

impl Checkpoints {
    fn dirs(&self) -> [PathBuf; 3] {
        [self.tokenizer.clone(), self.world_model.clone(), self.video_decoder.clone()]
    }

    fn load(&self) -> Result<Pipeline> {
        Pipeline::load(&self.tokenizer, &self.world_model, &self.video_decoder)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Free,
    Forced,
}

impl From<Mode> for StructureMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Free => StructureMode::Free,
            Mode::Forced => StructureMode::Forced,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Transcoding,
    Generation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    TopK,
    Loss,
}

#[derive(Subcommand)]
enum Command {
    /// Subsample and preprocess a corpus, or write the synthetic corpus.
    Preprocess(Source),
    /// Fine-tune the image tokenizer and decoder.
    TrainTok(Train),
    /// Fine-tune the world model's adapters and norms.
    TrainWm(Train),
    /// Fine-tune the temporally inflated video decoder.
    TrainVdec(Train),
    /// Predict frames after the first frames of a PNG clip directory.
    Generate {
        #[command(flatten)]
        checkpoints: Checkpoints,
        /// Directory of PNG frames; the first T are the initial frames.
        #[arg(long)]
        input: PathBuf,
        /// Number of initial frames T; defaults to the trained value.
        #[arg(long)]
        initial: Option<usize>,
        /// Number of predicted frames N; defaults to the trained value.
        #[arg(long)]
        frames: Option<usize>,
        /// Defaults to min(1000, vocabulary size).
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_enum, default_value = "free")]
        mode: Mode,
        #[arg(long)]
        repair_budget: Option<usize>,
        #[arg(long)]
        prompt: Option<String>,
        /// Recompute the full sequence every step instead of caching.
        #[arg(long)]
        no_cache: bool,
    },
    /// Score a tokenizer on transcoding or the full system on generation.
    Evaluate {
        #[arg(long, value_enum)]
        kind: EvalKind,
        #[command(flatten)]
        checkpoints: Checkpoints,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Ablation sweep over top-k or loss toggles.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[command(flatten)]
        checkpoints: Checkpoints,
        /// Top-k values; defaults to 1, 5, 10, 50, 200, 1000.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
}

fn config(cli: &Cli, stage: Stage) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(cli.preset, stage),
    };
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "configuration is for stage {}, this command needs {}",
            cfg.stage.name(),
            stage.name()
        )));
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train(cli: &Cli, stage: Stage, args: &Train) -> Result<()> {
    let mut cfg = config(cli, stage)?;
    if let Some(out) = &cli.out {
        cfg.checkpoint.dir = out.clone();
    }
    if let Some(t) = &args.tokenizer {
        cfg.checkpoint.tokenizer = Some(t.clone());
    }
    if let Some(m) = &args.manifest {
        cfg.data.manifest = Some(m.clone());
        cfg.data.synth = None;
    }
    cfg.validate()?;
    let resume = args.resume.as_deref();
    let manifest = match stage {
        Stage::Tok => train_tokenizer(&cfg, resume)?,
        Stage::Wm => train_world_model(&cfg, resume)?,
        Stage::Vdec => train_video_decoder(&cfg, resume)?,
    };
    println!(
        "{} finished at step {}: {} (content {})",
        stage.name(),
        manifest.step,
        cfg.checkpoint.dir.join("final").display(),
        manifest.content_hash
    );
    Ok(())
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn preprocess(cli: &Cli, src: &Source) -> Result<()> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("preprocess needs --out".into()))?;
    let m = match (&src.manifest, &src.synth) {
        (_, Some(v)) => {
            let spec = SynthSpec {
                count: v[0] as usize,
                width: v[1] as u32,
                height: v[2] as u32,
                frames: v[3] as usize,
                seed: v[4],
            };
            write_synthetic_corpus(out, spec)?
        }
        (Some(path), None) => {
            let pre = config(cli, Stage::Tok)?.data.preprocess;
            preprocess_corpus(&DatasetManifest::load(path)?, pre, out)?
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    println!("{} clips -> {}", m.records.len(), out.join("manifest.tsv").display());
    Ok(())
}

fn evaluate(cli: &Cli, kind: EvalKind, ck: &Checkpoints, top_k: Option<usize>) -> Result<()> {
    let out = out_dir(cli, "runs/eval");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let (header, reports) = match kind {
        EvalKind::Transcoding => {
            let cfg = config(cli, Stage::Tok)?;
            let (store, tok) = load_tokenizer(&ck.tokenizer, Some(&cfg))?;
            drop(store);
            let frames = validation_frames(&cfg, &TrainData::load(&cfg.data)?)?;
            let features = cfg.features.clone().expect("tok config has features");
            let reports = evaluate_transcoding(&tok, &frames, &features)?;
            (vec![format!("transcoding {}", ck.tokenizer.display())], reports)
        }
        EvalKind::Generation => {
            let cfg = config(cli, Stage::Wm)?;
            let p = ck.load()?;
            let clips = validation_clips(&cfg, &TrainData::load(&cfg.data)?)?;
            let k = top_k.unwrap_or(1000).min(p.world_model().config().image_vocab);
            let opts = GenerationEval { top_k: k, seed: cfg.seed, mode: StructureMode::Free };
            let reports = evaluate_generation(&p, &clips, opts)?;
            (vec![format!("generation, {} clips, FID and CMMD over pooled frames", clips.len())], reports)
        }
    };
    let path = out.join("report.txt");
    write_report(&path, &header, &reports)?;
    print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess(src) => preprocess(cli, src),
        Command::TrainTok(a) => train(cli, Stage::Tok, a),
        Command::TrainWm(a) => train(cli, Stage::Wm, a),
        Command::TrainVdec(a) => train(cli, Stage::Vdec, a),
        Command::Generate {
            checkpoints,
            input,
            initial,
            frames,
            top_k,
            mode,
            repair_budget,
            prompt,
            no_cache,
        } => {
            let p = checkpoints.load()?;
            let t = initial.unwrap_or(p.prediction().initial_frames);
            let n = frames.unwrap_or(p.prediction().predicted_frames);
            let k = top_k.unwrap_or_else(|| 1000.min(p.world_model().config().image_vocab));
            let initial = load_input_frames(input, t, p.tokenizer_config().data.preprocess)?;
            let mut req = GenerateRequest::new(initial, n, k, cli.seed.unwrap_or(0));
            req.mode = (*mode).into();
            req.repair_budget = *repair_budget;
            req.prompt = prompt.clone();
            req.use_cache = !no_cache;
            let out = out_dir(cli, "runs/generate");
            let run = generate_video(&p, &req, &out)?;
            println!(
                "{} frames -> {} ({} repairs)",
                run.frame_paths.len(),
                out.display(),
                run.manifest.repairs
            );
            Ok(())
        }
        Command::Evaluate {
            kind,
            checkpoints,
            top_k,
        } => evaluate(cli, *kind, checkpoints, *top_k),
        Command::Sweep { axis, checkpoints, values } => {
            let (cfg, axis) = match axis {
                Axis::TopK => {
                    let values = if values.is_empty() { TOP_K_SWEEP.to_vec() } else { values.clone() };
                    (config(cli, Stage::Wm)?, SweepAxis::TopK { values, checkpoints: checkpoints.dirs() })
                }
                Axis::Loss => (config(cli, Stage::Tok)?, SweepAxis::LossToggles),
            };
            let out = out_dir(cli, "runs/sweep");
            let outcome = run_sweep(&cfg, &axis, &out)?;
            print!("{}", outcome.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
