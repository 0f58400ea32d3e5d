//! Weakly-supervised mitosis localization: a residual CNN trained from
//! image-level labels whose per-cell probabilities localize mitotic figures.

pub mod backbone;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod head;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod overlay;
pub mod stain;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backbone::{Backbone, BackboneConfig, FeatureMap, Mode};
pub use head::{aggregate, bce_loss, Aggregator, GlobalScore, Head, HeadConfig, HeadMode, HeadOutput, ProbabilityMap};
pub use model::{images_to_tensor, ImagePrediction, Model, ModelOutput};
pub use numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("cannot load weights: {0}")]
    Load(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Independent RNG stream derived from a run seed and a stream name.
pub fn rng_stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
