use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::GeneratorConfig;
use crate::error::Result;
use crate::latent::{LatentW, LatentZ, StyleSequence, ZDistribution};
use crate::mapping::MappingNetwork;
use crate::nn::{join, ParamRef, Parameters};
use crate::scalar::Real;
use crate::synthesis::{NoiseMaps, SynthesisNetwork, SynthesisTrace};
use crate::tensor::Tensor;

/// Mapping network plus synthesis network.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub mapping: MappingNetwork<T>,
    pub synthesis: SynthesisNetwork<T>,
}

impl<T: Real> Generator<T> {
    pub fn init(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mapping = MappingNetwork::init(
            &mut rng,
            config.mapping_depth,
            config.z_dim,
            config.w_dim,
            config.mapping_lr_mul,
            config.mapping_final_activation,
        );
        let synthesis = SynthesisNetwork::init(config, &mut rng)?;
        Ok(Self { mapping, synthesis })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.synthesis.config
    }

    pub fn style_slots(&self) -> usize {
        self.synthesis.style_slots()
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            mapping: self.mapping.cast(),
            synthesis: self.synthesis.cast(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mapping: self.mapping.zeros_like(),
            synthesis: self.synthesis.zeros_like(),
        }
    }

    /// Image for a single `w` broadcast to every slot.
    pub fn synthesize_w(&self, w: &[T], noise: &NoiseMaps<T>) -> Result<SynthesisTrace<T>> {
        let styles = vec![w.to_vec(); self.style_slots()];
        self.synthesis.forward(&styles, noise)
    }
}

impl<T: Real> Parameters<T> for Generator<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.mapping.visit(&join(prefix, "mapping"), out);
        self.synthesis.visit(&join(prefix, "synthesis"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.mapping.visit_mut(out);
        self.synthesis.visit_mut(out);
    }
}

/// The `G = g ∘ f` interface consumed by the latent-space metrics. Images
/// are `[C, H, W]` tensors with values nominally in `[-1, 1]`.
pub trait LatentImageGenerator {
    fn z_dim(&self) -> usize;
    fn style_slots(&self) -> usize;
    /// The prior `P(z)` latents are drawn from.
    fn z_distribution(&self) -> ZDistribution {
        ZDistribution::Hypersphere
    }
    /// `f(z)`; the identity for generators without a mapping network.
    fn map(&self, z: &LatentZ) -> Result<LatentW>;
    /// `g(styles)` with noise drawn from `noise_seed`.
    fn synthesize(&self, styles: &StyleSequence, noise_seed: u64) -> Result<Tensor<f64>>;

    fn synthesize_w(&self, w: &LatentW, noise_seed: u64) -> Result<Tensor<f64>> {
        self.synthesize(&StyleSequence::broadcast(w, self.style_slots()), noise_seed)
    }

    fn generate(&self, z: &LatentZ, noise_seed: u64) -> Result<Tensor<f64>> {
        self.synthesize_w(&self.map(z)?, noise_seed)
    }
}

impl<T: Real> LatentImageGenerator for Generator<T> {
    fn z_dim(&self) -> usize {
        self.config().z_dim
    }

    fn style_slots(&self) -> usize {
        self.synthesis.style_slots()
    }

    fn z_distribution(&self) -> ZDistribution {
        self.config().z_distribution
    }

    fn map(&self, z: &LatentZ) -> Result<LatentW> {
        crate::mapping::map_latent(&self.mapping, z)
    }

    fn synthesize(&self, styles: &StyleSequence, noise_seed: u64) -> Result<Tensor<f64>> {
        let ws: Vec<Vec<T>> = styles
            .per_layer
            .iter()
            .map(|w| w.0.iter().map(|&v| T::from_f64(v)).collect())
            .collect();
        let noise = NoiseMaps::sample(self.config(), &mut ChaCha8Rng::seed_from_u64(noise_seed));
        Ok(self.synthesis.forward(&ws, &noise)?.image.cast())
    }
}
