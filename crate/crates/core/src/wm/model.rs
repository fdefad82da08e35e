//! Causal decoder-only transformer over text-prefix + image-token sequences.
//!
//! Pre-norm blocks (RMS norm, rotary multi-head attention, SwiGLU MLP), a final
//! RMS norm and a head over the `K + 1` image vocabulary. Text tokens are
//! input-only. A begin-of-sequence text token is always prepended so the first
//! image token has a predecessor even for an empty prompt.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::wm::lora::{FrozenPrecision, LoraConfig, LoraEmbedding, LoraLinear, RmsNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    /// `K + 1`: codebook size plus the end-of-image marker.
    pub image_vocab: usize,
    /// Text vocabulary excluding the begin-of-sequence token.
    pub text_vocab: usize,
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub context_length: usize,
    pub rope_theta: f64,
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub frozen_precision: FrozenPrecision,
}

impl WorldModelConfig {
    pub fn paper_scale() -> Self {
        Self {
            image_vocab: 8193,
            text_vocab: 32000,
            depth: 32,
            heads: 32,
            model_dim: 4096,
            mlp_dim: 11008,
            context_length: 1 << 20,
            rope_theta: 50_000_000.0,
            lora: Some(LoraConfig { rank: 64, alpha: 128.0 }),
            frozen_precision: FrozenPrecision::Bf16,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            image_vocab: 17,
            text_vocab: 256,
            depth: 2,
            heads: 2,
            model_dim: 64,
            mlp_dim: 128,
            context_length: 512,
            rope_theta: 10_000.0,
            lora: Some(LoraConfig { rank: 8, alpha: 16.0 }),
            frozen_precision: FrozenPrecision::F32,
        }
    }

    pub fn bos_token(&self) -> u32 {
        self.text_vocab as u32
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Input length for a teacher-forced sample: BOS + prompt + all image
    /// tokens but the last.
    pub fn input_len(&self, prompt_len: usize, image_len: usize) -> usize {
        1 + prompt_len + image_len.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("rotary embedding needs an even head dim".into()));
        }
        if self.image_vocab < 2 {
            return Err(Error::Config("image vocabulary needs the marker and a code".into()));
        }
        Ok(())
    }

    /// Checks that `(frames)` framed frames of `n` tokens plus the prompt fit.
    pub fn check_fits(&self, prompt_len: usize, frames: usize, tokens_per_frame: usize) -> Result<()> {
        let len = self.input_len(prompt_len, frames * (tokens_per_frame + 1));
        if len > self.context_length {
            return Err(Error::Length {
                len,
                context: self.context_length,
            });
        }
        Ok(())
    }

    /// Whether a parameter trains under LoRA fine-tuning: adapters and norms.
    pub fn is_trainable(&self, name: &str) -> bool {
        if self.lora.is_none() {
            return true;
        }
        name.contains("lora_") || name.contains("norm")
    }
}

/// Total and trainable parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCounts {
    pub total: usize,
    pub trainable: usize,
}

impl ParameterCounts {
    pub fn fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

impl WorldModelConfig {
    /// Counts parameters from the configuration alone, without allocating.
    pub fn parameter_counts(&self) -> ParameterCounts {
        let r = self.lora.map(|l| l.rank).unwrap_or(0);
        let (d, m) = (self.model_dim, self.mlp_dim);
        let mut base = 0;
        let mut adapters = 0;
        let mut norms = 0;
        let mut linear = |i: usize, o: usize| {
            base += i * o;
            adapters += r * (i + o);
        };
        for _ in 0..self.depth {
            for _ in 0..4 {
                linear(d, d);
            }
            linear(d, m);
            linear(d, m);
            linear(m, d);
            norms += 2 * d;
        }
        linear(d, self.image_vocab);
        linear(self.text_vocab + 1, d);
        linear(self.image_vocab, d);
        norms += d;
        let total = base + adapters + norms;
        let trainable = if self.lora.is_some() { adapters + norms } else { total };
        ParameterCounts { total, trainable }
    }
}

#[derive(Debug, Clone)]
struct Rotary {
    inv_freq: Vec<f32>,
    device: Device,
}

impl Rotary {
    fn new(cfg: &WorldModelConfig, device: &Device) -> Self {
        let hd = cfg.head_dim();
        let inv_freq = (0..hd / 2)
            .map(|i| 1.0 / cfg.rope_theta.powf(2.0 * i as f64 / hd as f64) as f32)
            .collect();
        Self {
            inv_freq,
            device: device.clone(),
        }
    }

    fn tables(&self, start: usize, len: usize) -> Result<(Tensor, Tensor)> {
        let half = self.inv_freq.len();
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for p in start..start + len {
            for f in &self.inv_freq {
                let a = p as f32 * f;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Ok((
            Tensor::from_vec(cos, (len, half), &self.device)?,
            Tensor::from_vec(sin, (len, half), &self.device)?,
        ))
    }

    /// Rotates `[B, H, L, hd]` at absolute positions `start..start + L`.
    fn apply(&self, x: &Tensor, start: usize) -> Result<Tensor> {
        let (_, _, l, hd) = x.dims4()?;
        let half = hd / 2;
        let (cos, sin) = self.tables(start, l)?;
        let x1 = x.narrow(D::Minus1, 0, half)?;
        let x2 = x.narrow(D::Minus1, half, half)?;
        let r1 = (x1.broadcast_mul(&cos)? - x2.broadcast_mul(&sin)?)?;
        let r2 = (x1.broadcast_mul(&sin)? + x2.broadcast_mul(&cos)?)?;
        Ok(Tensor::cat(&[r1, r2], D::Minus1)?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn_norm: RmsNorm,
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    mlp_norm: RmsNorm,
    gate: LoraLinear,
    up: LoraLinear,
    down: LoraLinear,
}

/// Cached keys and values per block, `[B, H, len, hd]`.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn causal_mask(q_len: usize, start: usize, device: &Device) -> Result<Tensor> {
    let k_len = start + q_len;
    let v: Vec<f32> = (0..q_len)
        .flat_map(|i| (0..k_len).map(move |j| if j <= start + i { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(v, (q_len, k_len), device)?)
}

impl Block {
    fn new(vs: &Scope, cfg: &WorldModelConfig) -> Result<Self> {
        let (d, m, lora, p) = (cfg.model_dim, cfg.mlp_dim, cfg.lora, cfg.frozen_precision);
        let lin = |name: &str, i: usize, o: usize| LoraLinear::new(&vs.pp(name), i, o, lora, p);
        Ok(Self {
            attn_norm: RmsNorm::new(&vs.pp("attn_norm"), d)?,
            q: lin("attn.q", d, d)?,
            k: lin("attn.k", d, d)?,
            v: lin("attn.v", d, d)?,
            o: lin("attn.o", d, d)?,
            mlp_norm: RmsNorm::new(&vs.pp("mlp_norm"), d)?,
            gate: lin("mlp.gate", d, m)?,
            up: lin("mlp.up", d, m)?,
            down: lin("mlp.down", m, d)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        rope: &Rotary,
        heads: usize,
        start: usize,
        cache: Option<&mut Option<(Tensor, Tensor)>>,
    ) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let hd = d / heads;
        let h = self.attn_norm.forward(x)?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = rope.apply(&split(self.q.forward(&h)?)?, start)?;
        let mut k = rope.apply(&split(self.k.forward(&h)?)?, start)?;
        let mut v = split(self.v.forward(&h)?)?;
        if let Some(slot) = cache {
            if let Some((pk, pv)) = slot.as_ref() {
                k = Tensor::cat(&[pk, &k], 2)?;
                v = Tensor::cat(&[pv, &v], 2)?;
            }
            *slot = Some((k.clone(), v.clone()));
        }
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let scores = scores.broadcast_add(&causal_mask(l, start, x.device())?)?;
        let attn = candle_nn::ops::softmax_last_dim(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        let x = (x + self.o.forward(&ctx)?)?;
        let h = self.mlp_norm.forward(&x)?;
        let act = (candle_nn::ops::silu(&self.gate.forward(&h)?)? * self.up.forward(&h)?)?;
        Ok((x + self.down.forward(&act)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    cfg: WorldModelConfig,
    text_embed: LoraEmbedding,
    image_embed: LoraEmbedding,
    blocks: Vec<Block>,
    norm_out: RmsNorm,
    head: LoraLinear,
    rope: Rotary,
    device: Device,
}

impl WorldModel {
    pub fn new(store: &ParamStore, cfg: &WorldModelConfig) -> Result<Self> {
        cfg.validate()?;
        let vs = store.root();
        let (lora, p) = (cfg.lora, cfg.frozen_precision);
        Ok(Self {
            cfg: cfg.clone(),
            text_embed: LoraEmbedding::new(&vs.pp("text_embed"), cfg.text_vocab + 1, cfg.model_dim, lora, p)?,
            image_embed: LoraEmbedding::new(&vs.pp("image_embed"), cfg.image_vocab, cfg.model_dim, lora, p)?,
            blocks: (0..cfg.depth)
                .map(|i| Block::new(&vs.pp(format!("blocks.{i}")), cfg))
                .collect::<Result<_>>()?,
            norm_out: RmsNorm::new(&vs.pp("norm_out"), cfg.model_dim)?,
            head: LoraLinear::new(&vs.pp("head"), cfg.model_dim, cfg.image_vocab, lora, p)?,
            rope: Rotary::new(cfg, store.device()),
            device: store.device().clone(),
        })
    }

    pub fn config(&self) -> &WorldModelConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Embeds `[B, Lt]` text ids (BOS included) and `[B, Li]` image ids.
    fn embed(&self, text: Option<&Tensor>, image: Option<&Tensor>) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(2);
        if let Some(t) = text {
            parts.push(self.text_embed.forward(t)?);
        }
        if let Some(i) = image {
            if i.dim(1)? > 0 {
                parts.push(self.image_embed.forward(i)?);
            }
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    fn run(&self, x: Tensor, start: usize, mut cache: Option<&mut KvCache>) -> Result<Tensor> {
        let l = x.dim(1)?;
        if start + l > self.cfg.context_length {
            return Err(Error::Length {
                len: start + l,
                context: self.cfg.context_length,
            });
        }
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let slot = match cache.as_deref_mut() {
                Some(c) => {
                    if c.layers.len() < self.blocks.len() {
                        c.layers.resize(self.blocks.len(), None);
                    }
                    Some(&mut c.layers[i])
                }
                None => None,
            };
            h = block.forward(&h, &self.rope, self.cfg.heads, start, slot)?;
        }
        if let Some(c) = cache {
            c.len = start + l;
        }
        self.head.forward(&self.norm_out.forward(&h)?)
    }

    fn text_ids(&self, prompt: &[u32], batch: usize) -> Result<Tensor> {
        if let Some(bad) = prompt.iter().find(|&&t| t as usize >= self.cfg.text_vocab) {
            return Err(Error::Parameter(format!("text token {bad} outside vocabulary")));
        }
        let mut ids = Vec::with_capacity(prompt.len() + 1);
        ids.push(self.cfg.bos_token());
        ids.extend_from_slice(prompt);
        let t = Tensor::from_vec(ids, (1, prompt.len() + 1), &self.device)?;
        Ok(t.repeat((batch, 1))?)
    }

    fn image_ids(&self, images: &[Vec<u32>]) -> Result<Tensor> {
        let len = images.first().map(Vec::len).unwrap_or(0);
        let mut flat = Vec::with_capacity(images.len() * len);
        for seq in images {
            if seq.len() != len {
                return Err(Error::Dimension("image sequences differ in length".into()));
            }
            if let Some(bad) = seq.iter().find(|&&t| t as usize >= self.cfg.image_vocab) {
                return Err(Error::Parameter(format!("image token {bad} outside vocabulary")));
            }
            flat.extend_from_slice(seq);
        }
        Ok(Tensor::from_vec(flat, (images.len(), len), &self.device)?)
    }

    /// Logits `[B, 1 + M + Li, K + 1]` for BOS + prompt + the given image
    /// tokens; row `l` depends only on inputs `0..=l`.
    pub fn forward_logits(&self, prompt: &[u32], images: &[Vec<u32>]) -> Result<Tensor> {
        let b = images.len().max(1);
        let text = self.text_ids(prompt, b)?;
        let image = if images.is_empty() { None } else { Some(self.image_ids(images)?) };
        let x = self.embed(Some(&text), image.as_ref())?;
        self.run(x, 0, None)
    }

    /// Teacher-forced logits for the full image sequences `[B, Li]`: rows
    /// predicting each of the `Li` image tokens, `[B, Li, K + 1]`.
    pub fn teacher_forced_logits(&self, prompt: &[u32], images: &[Vec<u32>]) -> Result<Tensor> {
        let li = images.first().map(Vec::len).unwrap_or(0);
        if li == 0 {
            return Err(Error::Dimension("empty image sequence".into()));
        }
        let inputs: Vec<Vec<u32>> = images.iter().map(|s| s[..li - 1].to_vec()).collect();
        let logits = self.forward_logits(prompt, &inputs)?;
        Ok(logits.narrow(1, prompt.len(), li)?)
    }

    /// Runs new positions through the model, extending `cache`. Returns the
    /// logits of the new positions, `[1, L, K + 1]`.
    pub fn forward_cached(
        &self,
        prompt: Option<&[u32]>,
        image: &[u32],
        cache: &mut KvCache,
    ) -> Result<Tensor> {
        let text = prompt.map(|p| self.text_ids(p, 1)).transpose()?;
        let image = if image.is_empty() {
            None
        } else {
            Some(self.image_ids(&[image.to_vec()])?)
        };
        let x = self.embed(text.as_ref(), image.as_ref())?;
        let start = cache.len;
        self.run(x, start, Some(cache))
    }

    /// Counts the parameters registered in `store` under this model's
    /// trainability rule.
    pub fn parameter_counts(&self, store: &ParamStore) -> ParameterCounts {
        let mut counts = ParameterCounts { total: 0, trainable: 0 };
        for (name, var) in store.named() {
            let n = var.elem_count();
            counts.total += n;
            if self.cfg.is_trainable(&name) {
                counts.trainable += n;
            }
        }
        counts
    }

    /// Softmax probabilities `[L, K + 1]` for a single sequence.
    pub fn probabilities(&self, prompt: &[u32], image: &[u32]) -> Result<Tensor> {
        let logits = self.forward_logits(prompt, &[image.to_vec()])?.squeeze(0)?;
        Ok(candle_nn::ops::softmax_last_dim(&logits.to_dtype(DType::F32)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(lora: Option<LoraConfig>) -> WorldModelConfig {
        WorldModelConfig {
            image_vocab: 5,
            text_vocab: 8,
            depth: 2,
            heads: 2,
            model_dim: 8,
            mlp_dim: 16,
            context_length: 32,
            rope_theta: 10_000.0,
            lora,
            frozen_precision: FrozenPrecision::F32,
        }
    }

    fn rows(t: &Tensor) -> Vec<Vec<f32>> {
        t.squeeze(0).unwrap().to_vec2().unwrap()
    }

    #[test]
    fn suffix_edits_leave_prefix_rows_unchanged() {
        let store = ParamStore::new(11, &Device::Cpu);
        let model = WorldModel::new(&store, &tiny(None)).unwrap();
        let prompt = [3u32, 1];
        let base: Vec<u32> = vec![1, 2, 3, 4, 0, 2, 2];
        let reference = rows(&model.forward_logits(&prompt, &[base.clone()]).unwrap());
        for p in 0..base.len() {
            for v in 0..5u32 {
                let mut edited = base.clone();
                edited[p] = v;
                let out = rows(&model.forward_logits(&prompt, &[edited]).unwrap());
                // image position p sits at row 1 + M + p
                let cut = 1 + prompt.len() + p;
                assert_eq!(&out[..cut], &reference[..cut], "edit at {p}");
            }
        }
    }

    #[test]
    fn cached_matches_uncached() {
        let store = ParamStore::new(12, &Device::Cpu);
        let model = WorldModel::new(&store, &tiny(Some(LoraConfig { rank: 2, alpha: 4.0 }))).unwrap();
        let prompt = [5u32];
        let seq: Vec<u32> = vec![1, 4, 2, 0, 3, 3, 1];
        let full = rows(&model.forward_logits(&prompt, &[seq.clone()]).unwrap());
        let mut cache = KvCache::default();
        let mut stepped = rows(&model.forward_cached(Some(&prompt), &seq[..2], &mut cache).unwrap());
        for &t in &seq[2..] {
            stepped.extend(rows(&model.forward_cached(None, &[t], &mut cache).unwrap()));
        }
        assert_eq!(cache.len(), full.len());
        for (a, b) in full.iter().zip(&stepped) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_initialized_adapters_preserve_logits() {
        let store = ParamStore::new(13, &Device::Cpu);
        let base = WorldModel::new(&store, &tiny(None)).unwrap();
        let adapted = WorldModel::new(&store, &tiny(Some(LoraConfig { rank: 2, alpha: 4.0 }))).unwrap();
        let seq = vec![vec![2u32, 3, 0, 1]];
        let a = base.forward_logits(&[1, 2], &seq).unwrap();
        let b = adapted.forward_logits(&[1, 2], &seq).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff <= 1e-6);
    }

    #[test]
    fn trainable_mask_and_counts() {
        let cfg = tiny(Some(LoraConfig { rank: 2, alpha: 4.0 }));
        let store = ParamStore::new(14, &Device::Cpu);
        let model = WorldModel::new(&store, &cfg).unwrap();
        // hand count: per linear r*(in+out), per embedding r*(vocab+dim), norms 2*d per block + d
        let r = 2;
        let per_block = 4 * r * (8 + 8) + 3 * r * (8 + 16) + 2 * 8;
        let adapters_out = r * (8 + 5) + r * (9 + 8) + r * (5 + 8) + 8;
        let trainable = 2 * per_block + adapters_out;
        let base_total = 2 * (4 * 64 + 3 * 128) + 8 * 5 + 9 * 8 + 5 * 8;
        let counted = model.parameter_counts(&store);
        assert_eq!(counted.trainable, trainable);
        assert_eq!(counted.total, base_total + trainable);
        assert_eq!(counted, cfg.parameter_counts());
        for name in store.named().keys() {
            let declared = name.contains(".lora_") || name.ends_with("norm.weight") || name == "norm_out.weight";
            assert_eq!(cfg.is_trainable(name), declared, "{name}");
        }
    }

    #[test]
    fn paper_scale_trainable_fraction() {
        let counts = WorldModelConfig::paper_scale().parameter_counts();
        let pct = 100.0 * counts.fraction();
        assert!((pct - 2.39).abs() < 0.05, "{pct}");
    }

    #[test]
    fn context_overflow_is_reported() {
        let store = ParamStore::new(15, &Device::Cpu);
        let model = WorldModel::new(&store, &tiny(None)).unwrap();
        let long = vec![vec![1u32; 40]];
        assert!(matches!(model.forward_logits(&[], &long), Err(Error::Length { .. })));
        assert!(tiny(None).check_fits(0, 3, 10).is_err());
        assert!(tiny(None).check_fits(0, 2, 10).is_ok());
    }

    #[test]
    fn seeded_construction_is_reproducible() {
        let logits = |seed| {
            let store = ParamStore::new(seed, &Device::Cpu);
            let model = WorldModel::new(&store, &tiny(None)).unwrap();
            rows(&model.forward_logits(&[1], &[vec![1, 2, 0]]).unwrap())
        };
        assert_eq!(logits(7), logits(7));
        assert_ne!(logits(7), logits(8));
    }
}
