//! World model: sequence framing, causal transformer with low-rank adapters,
//! teacher-forced objective and top-k autoregressive generation.

pub mod framing;
pub mod lora;
pub mod model;
pub mod sampling;

pub use framing::{
    frame_indices, frame_text_prompt, unframe_indices, ByteCodec, FramedSequence, TextCodec,
    UnframeMode, Unframed, DEFAULT_PROMPT, END_OF_IMAGE,
};
pub use lora::{FrozenPrecision, LoraConfig, LoraEmbedding, LoraLinear, RmsNorm};
pub use model::{KvCache, ParameterCounts, WorldModel, WorldModelConfig};
pub use sampling::{
    cross_entropy, cross_entropy_from_rows, generate, top_k_indices, top_k_sample,
    GenerationOutput, GenerationParams, ProbabilityRow, StructureMode,
};
