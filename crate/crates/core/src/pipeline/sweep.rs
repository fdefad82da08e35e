//! Ablation sweeps. A failing leg is recorded and the sweep moves on.

use std::path::{Path, PathBuf};

use crate::data::{Frame, SampleMode};
use crate::error::{Error, Result};
use crate::losses::LossTerm;
use crate::metrics::{render_report, write_report, MetricReport};
use crate::pipeline::evaluate::{evaluate_generation, evaluate_transcoding, GenerationEval};
use crate::pipeline::Pipeline;
use crate::train::{run, RunConfig, Stage, TokenizerTrainer, TrainData};
use crate::wm::StructureMode;

/// Top-k values of the generation ablation.
pub const TOP_K_SWEEP: [usize; 6] = [1, 5, 10, 50, 200, 1000];

/// Row labels of the loss ablation: everything, then one term left out.
pub const LOSS_TOGGLE_VARIANTS: [&str; 5] = ["J_total", "-J_SSL", "-J'", "-J_L2", "-J_G"];

#[derive(Debug, Clone)]
pub enum SweepAxis {
    /// Generation metrics per top-k value; `checkpoints` are the tokenizer,
    /// world-model and video-decoder directories.
    TopK { values: Vec<usize>, checkpoints: [PathBuf; 3] },
    /// One tokenizer trained per loss configuration, scored on transcoding.
    LossToggles,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub header: Vec<String>,
    pub reports: Vec<MetricReport>,
    /// `(leg, error)` for every failed leg.
    pub failures: Vec<(String, String)>,
}

impl SweepOutcome {
    /// Distinct (variant, top-k) rows that produced metrics.
    pub fn rows(&self) -> Vec<(String, Option<usize>)> {
        let mut rows = Vec::new();
        for r in &self.reports {
            let key = (r.variant.clone(), r.top_k);
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
        rows
    }

    fn full_header(&self) -> Vec<String> {
        let mut h = self.header.clone();
        h.extend(self.failures.iter().map(|(leg, e)| format!("failed {leg}: {e}")));
        h
    }

    pub fn render(&self) -> String {
        render_report(&self.full_header(), &self.reports)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_report(path, &self.full_header(), &self.reports)
    }

    fn leg(&mut self, name: String, outcome: Result<Vec<MetricReport>>) {
        match outcome {
            Ok(r) => self.reports.extend(r),
            Err(e) => {
                log::error!("sweep leg {name} failed: {e}");
                self.failures.push((name, e.to_string()));
            }
        }
    }
}

/// Up to `validation_samples` (at least two) T+N windows of the validation split.
pub fn validation_clips(cfg: &RunConfig, data: &TrainData) -> Result<Vec<Vec<Frame>>> {
    let p = cfg
        .prediction
        .as_ref()
        .ok_or_else(|| Error::Config("the top-k sweep needs a wm-stage config".into()))?;
    let mode = SampleMode::Prediction {
        initial: p.initial_frames,
        predicted: p.predicted_frames,
    };
    data.val
        .sample_refs(mode, cfg.seed)
        .into_iter()
        .take(cfg.validation_samples.max(2))
        .map(|r| data.val.get(r, mode))
        .collect()
}

/// Up to `validation_samples` (at least two) validation frames.
pub fn validation_frames(cfg: &RunConfig, data: &TrainData) -> Result<Vec<Frame>> {
    data.val
        .sample_refs(SampleMode::Image, cfg.seed)
        .into_iter()
        .take(cfg.validation_samples.max(2))
        .map(|r| Ok(data.val.get(r, SampleMode::Image)?.remove(0)))
        .collect()
}

/// Generation metrics for each top-k value. Values above the vocabulary
/// size run at the vocabulary size and keep their requested label.
pub fn top_k_sweep(p: &Pipeline, clips: &[Vec<Frame>], values: &[usize], seed: u64) -> SweepOutcome {
    let vocab = p.world_model().config().image_vocab;
    let mut out = SweepOutcome {
        header: vec![
            "axis top-k".into(),
            format!("{} clips, seed {seed}, FID and CMMD over pooled frames of all clips", clips.len()),
        ],
        ..Default::default()
    };
    for &k in values {
        let effective = k.min(vocab);
        if effective != k {
            out.header.push(format!("top-k {k} runs at the vocabulary size {vocab}"));
        }
        let opts = GenerationEval { top_k: effective, seed, mode: StructureMode::Free };
        let leg = evaluate_generation(p, clips, opts).map(|mut reports| {
            for r in &mut reports {
                r.top_k = Some(k);
                r.variant = "generation".into();
                r.config_hash = p.checkpoints()[1].config_hash.clone();
            }
            reports
        });
        out.leg(format!("top-k {k}"), leg);
    }
    out
}

/// The full loss and each single-term omission, in [`LOSS_TOGGLE_VARIANTS`]
/// order; tokenizer checkpoints land in `out/<variant>/`.
pub fn loss_toggle_sweep(base: &RunConfig, data: &TrainData, frames: &[Frame], out: &Path) -> Result<SweepOutcome> {
    if base.stage != Stage::Tok {
        return Err(Error::Config("the loss sweep needs a tok-stage config".into()));
    }
    let weights = base.loss.expect("tok config has loss weights");
    let features = base.features.clone().expect("tok config has features");
    let legs: Vec<(&str, String, _)> = std::iter::once((LOSS_TOGGLE_VARIANTS[0], "full".to_string(), weights))
        .chain(LossTerm::ALL.iter().map(|&t| {
            (
                t.label(),
                format!("no-{t:?}").to_lowercase(),
                weights.without(t),
            )
        }))
        .collect();
    let mut outcome = SweepOutcome {
        header: vec![
            "axis loss toggles".into(),
            format!("{} validation frames, seed {}, FID and CMMD over pooled frames", frames.len(), base.seed),
        ],
        ..Default::default()
    };
    for (label, dir, w) in legs {
        let mut cfg = base.clone();
        cfg.loss = Some(w);
        cfg.checkpoint.dir = out.join(&dir);
        let leg = (|| {
            let mut t = TokenizerTrainer::new(cfg.clone(), data.clone())?;
            run(&mut t)?;
            let mut reports = evaluate_transcoding(t.model(), frames, &features)?;
            let hash = cfg.config_hash()?;
            for r in &mut reports {
                r.variant = label.into();
                r.config_hash = hash.clone();
            }
            Ok(reports)
        })();
        outcome.leg(label.into(), leg);
    }
    Ok(outcome)
}

/// Runs one sweep from a base run configuration, writing `out/sweep.txt`.
pub fn run_sweep(base: &RunConfig, axis: &SweepAxis, out: &Path) -> Result<SweepOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = TrainData::load(&base.data)?;
    let outcome = match axis {
        SweepAxis::TopK { values, checkpoints: [t, w, v] } => {
            let p = Pipeline::load(t, w, v)?;
            top_k_sweep(&p, &validation_clips(base, &data)?, values, base.seed)
        }
        SweepAxis::LossToggles => loss_toggle_sweep(base, &data, &validation_frames(base, &data)?, out)?,
    };
    outcome.write(&out.join("sweep.txt"))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::parse_report;
    use crate::pipeline::testutil::{dirs, tiny_checkpoints};
    use crate::train::testutil::{tiny_config, tiny_data};

    #[test]
    fn top_k_axis_six_rows_and_continues_past_failures() {
        let root = tempfile::tempdir().unwrap();
        tiny_checkpoints(root.path());
        let [t, w, v] = dirs(root.path());
        let p = Pipeline::load(&t, &w, &v).unwrap();
        let cfg = tiny_config(Stage::Wm, root.path());
        let clips = validation_clips(&cfg, &tiny_data()).unwrap();
        let s = top_k_sweep(&p, &clips, &TOP_K_SWEEP, 0);
        assert!(s.failures.is_empty(), "{:?}", s.failures);
        let ks: Vec<_> = s.rows().into_iter().map(|(_, k)| k.unwrap()).collect();
        assert_eq!(ks, TOP_K_SWEEP);
        assert!(s.header.iter().any(|h| h.contains("1000 runs at the vocabulary size 9")));
        let text = s.render();
        assert_eq!(parse_report(&text).unwrap(), s.reports);

        let broken = top_k_sweep(&p, &clips, &[1, 0, 5], 0);
        assert_eq!(broken.rows().len(), 2);
        assert_eq!(broken.failures.len(), 1);
        assert!(broken.render().contains("# failed top-k 0"));
    }

    #[test]
    fn loss_toggle_axis_mirrors_ablation_rows() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(Stage::Tok, root.path());
        cfg.schedule.total_steps = 4;
        let data = tiny_data();
        let frames = validation_frames(&cfg, &data).unwrap();
        let s = loss_toggle_sweep(&cfg, &data, &frames, root.path()).unwrap();
        assert!(s.failures.is_empty(), "{:?}", s.failures);
        let variants: Vec<_> = s.rows().into_iter().map(|(v, _)| v).collect();
        assert_eq!(variants, LOSS_TOGGLE_VARIANTS);
        assert_eq!(s.reports.len(), 5 * 6);
        assert!(root.path().join("no-ssl/final").is_dir());
        assert_eq!(parse_report(&s.render()).unwrap(), s.reports);
        // the full configuration and an omission train different models
        let hashes: Vec<_> = s.reports.iter().map(|r| r.config_hash.clone()).collect();
        assert_ne!(hashes[0], hashes[6]);
    }

    #[test]
    fn run_sweep_writes_report() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(Stage::Tok, &root.path().join("ck"));
        cfg.schedule.total_steps = 4;
        cfg.data.synth = Some(crate::data::SynthSpec { count: 5, width: 32, height: 32, frames: 12, seed: 1 });
        cfg.data.synth_dir = Some(root.path().join("synth"));
        cfg.data.manifest = None;
        cfg.data.preprocess = crate::data::PreprocessConfig { scale: 0.5, crop: 16, target_fps: 4.0 };
        let out = root.path().join("sweep");
        let s = run_sweep(&cfg, &SweepAxis::LossToggles, &out).unwrap();
        let text = std::fs::read_to_string(out.join("sweep.txt")).unwrap();
        assert_eq!(parse_report(&text).unwrap(), s.reports);
        assert!(text.contains("# summary"));
    }
}
