//! Encoder-based inversion of frozen image generators.
//!
//! An encoder is trained against a frozen generator so that
//! `G(E(x))` reproduces `x` under a combined image and latent similarity
//! loss evaluated on the original image and two attention views. The trained
//! encoder inverts images in one pass, and can be fine-tuned per batch.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod evalharness;
pub mod generators;
pub mod imageio;
pub mod inversion;
pub mod latent;
pub mod layers;
pub mod params;
pub mod similarity;
pub mod training;

pub use attention::{AttentionConfig, AttentionMode, TripleScaleViews};
pub use backbone::{Backbone, BackboneSpec};
pub use encoder::{Encoder, EncoderSpec};
pub use error::{DseError, Result};
pub use generators::{Generator, GeneratorSpec};
pub use latent::{Family, LatentBundle};
pub use similarity::{LossBreakdown, LossConfig, LossWeights};
pub use training::{train_dse, Strategy, TrainConfig, TrainHistory};
