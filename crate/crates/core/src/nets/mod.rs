//! Toy-scale networks: latent codec, transformer generator with semantic
//! conditioning, patch discriminator, frozen feature extractor and LoRA.

pub mod codec;
pub mod discriminator;
pub mod features;
pub mod generator;
pub mod lora;
pub mod params;

pub use codec::{decode_latent, encode_latent, patchify, unpatchify, LatentCodec, LatentGrid};
pub use discriminator::{discriminator_forward, Discriminator, DiscriminatorConfig, DiscriminatorOutput};
pub use features::{feature_extract, feature_extract_image, feature_weights, FEATURE_STAGES};
pub use generator::{generator_forward, restore, restore_image, semantic_encode, Generator, GeneratorConfig, Restoration};
pub use lora::{apply_lora, lora_linear, LowRankAdapter};
pub use params::{BindMode, Bound, Param, ParamStore};
