//! Style-based GAN generator at desk scale: mapping network, AdaIN-driven
//! synthesis network with per-layer noise, adversarial training with
//! non-saturating/R1 and WGAN-GP losses, style mixing, truncation in W, and
//! the latent-space metrics (perceptual path length, linear separability,
//! Fréchet distance).

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod images;
pub mod latent;
pub mod mapping;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod report;
pub mod sampling;
pub mod scalar;
pub mod synthesis;
pub mod tensor;
pub mod training;

pub use config::{GeneratorConfig, InputKind};
pub use error::{Error, Result};
pub use generator::{Generator, LatentImageGenerator};
pub use latent::{LatentW, LatentZ, StyleSequence, TruncationParams};
pub use tensor::Tensor;
