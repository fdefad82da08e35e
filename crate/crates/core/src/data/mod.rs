//! Dataset ingestion: manifests, fps subsampling, resolution streamlining,
//! deterministic sample streams and PNG frame export.

pub mod clip;
pub mod frame;
pub mod io;
pub mod manifest;
pub mod samples;
pub mod synth;

pub use clip::{subsample_clip, subsample_indices, Split, VideoClip};
pub use frame::{crop_origin, denormalize, denormalize_value, preprocess_image, resize_bilinear, Frame, RawFrame};
pub use io::{export_frames, frame_file_name, load_raw_clip, preprocess_corpus, write_raw_frames};
pub use manifest::{DatasetManifest, ManifestRecord};
pub use samples::{window_starts, Dataset, PreprocessConfig, SampleMode, SampleRef, SampleStream};
pub use synth::{moving_square_clip, write_synthetic_corpus, SynthSpec, SYNTH_SOURCE_FPS};
