//! Next-token objective, top-k sampling and the autoregressive generation loop.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vq::IndexGrid;
use crate::wm::framing::{frame_indices, unframe_indices, UnframeMode, END_OF_IMAGE};
use crate::wm::model::{KvCache, WorldModel};

pub const PROB_FLOOR: f64 = 1e-12;

/// A distribution over the `K + 1` image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityRow(Vec<f32>);

impl ProbabilityRow {
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Numerical {
                component: "probability row".into(),
                reason: "negative or NaN entry".into(),
            });
        }
        let sum: f64 = probs.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Numerical {
                component: "probability row".into(),
                reason: format!("sums to {sum}"),
            });
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn rows(probs: &Tensor) -> Result<Vec<Self>> {
        probs
            .to_dtype(DType::F32)?
            .to_vec2::<f32>()?
            .into_iter()
            .map(Self::new)
            .collect()
    }
}

/// Mean negative log-likelihood of `targets` under softmax(`logits`),
/// `logits` `[..., V]` flattened against `targets` in the same order. Each
/// log-probability is floored at `ln(1e-12)`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let v = logits.dim(D::Minus1)?;
    let flat = logits.reshape(((), v))?;
    if flat.dim(0)? != targets.len() {
        return Err(Error::Dimension(format!(
            "{} prediction rows for {} targets",
            flat.dim(0)?,
            targets.len()
        )));
    }
    let logp = candle_nn::ops::log_softmax(&flat, D::Minus1)?;
    let idx = Tensor::from_slice(targets, (targets.len(), 1), logits.device())?;
    let picked = logp.gather(&idx, 1)?.squeeze(1)?;
    let floored = picked.maximum(PROB_FLOOR.ln())?;
    Ok(floored.mean_all()?.neg()?)
}

/// Same objective computed from probability rows.
pub fn cross_entropy_from_rows(rows: &[ProbabilityRow], targets: &[u32]) -> Result<f64> {
    if rows.len() != targets.len() || rows.is_empty() {
        return Err(Error::Dimension(format!(
            "{} rows for {} targets",
            rows.len(),
            targets.len()
        )));
    }
    let total: f64 = rows
        .iter()
        .zip(targets)
        .map(|(r, &t)| -(r.probs()[t as usize] as f64).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / rows.len() as f64)
}

/// The `k` most probable indices, ties broken towards the lower index.
pub fn top_k_indices(probs: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Samples from the `k` most probable entries after renormalization; `k = 1`
/// is argmax and draws nothing from `rng`.
pub fn top_k_sample(row: &ProbabilityRow, k: usize, rng: &mut impl Rng) -> Result<u32> {
    let v = row.len();
    if k == 0 || k > v {
        return Err(Error::Parameter(format!("top-k {k} outside [1, {v}]")));
    }
    let top = top_k_indices(row.probs(), k);
    if k == 1 {
        return Ok(top[0] as u32);
    }
    let mass: f64 = top.iter().map(|&i| row.probs()[i] as f64).sum();
    if !(mass > 0.0) {
        return Ok(top[0] as u32);
    }
    let mut u = rng.random::<f64>() * mass;
    for &i in &top {
        u -= row.probs()[i] as f64;
        if u < 0.0 {
            return Ok(i as u32);
        }
    }
    Ok(*top.last().expect("k >= 1") as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureMode {
    /// Every position is sampled, markers included.
    #[default]
    Free,
    /// Marker slots are overwritten with the end-of-image token.
    Forced,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub grids: Vec<IndexGrid>,
    /// Raw sampled image tokens, `N * n'` entries.
    pub tokens: Vec<u32>,
    pub iterations: usize,
    pub repairs: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationParams {
    pub frames: usize,
    pub top_k: usize,
    pub mode: StructureMode,
    pub use_cache: bool,
}

/// Predicts `params.frames` future frames after `initial`, one token per
/// iteration, `N * n'` iterations in total.
pub fn generate(
    model: &WorldModel,
    prompt: &[u32],
    initial: &[IndexGrid],
    params: GenerationParams,
    rng: &mut impl Rng,
) -> Result<GenerationOutput> {
    let Some(first) = initial.first() else {
        return Err(Error::Parameter("generation needs at least one initial frame".into()));
    };
    let n = first.len();
    let stride = n + 1;
    let total_frames = initial.len() + params.frames;
    model
        .config()
        .check_fits(prompt.len(), total_frames, n)?;
    if params.top_k == 0 || params.top_k > model.config().image_vocab {
        return Err(Error::Parameter(format!(
            "top-k {} outside [1, {}]",
            params.top_k,
            model.config().image_vocab
        )));
    }
    let mut seq = frame_indices(initial)?;
    let steps = params.frames * stride;
    let mut out = Vec::with_capacity(steps);
    let mut cache = KvCache::default();
    let mut last = if params.use_cache {
        model.forward_cached(Some(prompt), &seq, &mut cache)?
    } else {
        model.forward_logits(prompt, &[seq.clone()])?
    };
    for step in 0..steps {
        let l = last.dim(1)?;
        let logits = last.get(0)?.get(l - 1)?.to_dtype(DType::F32)?;
        let probs = candle_nn::ops::softmax_last_dim(&logits.unsqueeze(0)?)?.squeeze(0)?;
        let row = ProbabilityRow::new(probs.to_vec1()?)?;
        let mut tok = top_k_sample(&row, params.top_k, rng)?;
        if params.mode == StructureMode::Forced {
            let marker_slot = (step + 1) % stride == 0;
            tok = if marker_slot {
                END_OF_IMAGE
            } else if tok == END_OF_IMAGE {
                // most probable non-marker token
                top_k_indices(row.probs(), row.len())
                    .into_iter()
                    .find(|&i| i as u32 != END_OF_IMAGE)
                    .expect("vocab has codes") as u32
            } else {
                tok
            };
        }
        out.push(tok);
        seq.push(tok);
        if step + 1 < steps {
            last = if params.use_cache {
                model.forward_cached(None, &[tok], &mut cache)?
            } else {
                model.forward_logits(prompt, &[seq.clone()])?
            };
        }
    }
    let mode = match params.mode {
        StructureMode::Forced => UnframeMode::Strict,
        StructureMode::Free => UnframeMode::Lenient,
    };
    let unframed = unframe_indices(&out, first.grid(), mode)?;
    Ok(GenerationOutput {
        grids: unframed.grids,
        tokens: out,
        iterations: steps,
        repairs: unframed.repairs,
    })
}
