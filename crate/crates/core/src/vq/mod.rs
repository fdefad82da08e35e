//! Image tokenizer (encoder + vector quantizer), image decoder and the 2D
//! patch discriminator.

pub mod config;
pub mod discriminator;
pub mod model;
pub mod quantizer;

pub use config::{AutoencoderConfig, DiscriminatorConfig, DiscriminatorVariant};
pub use discriminator::PatchDiscriminator;
pub use model::{AutoencoderOutput, Decoder, Encoder, IndexGrid, LatentGrid, VqAutoencoder};
pub use quantizer::{nearest_indices, quantize_rows, straight_through, Codebook};
