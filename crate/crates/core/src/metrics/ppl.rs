use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mean_and_stderr;
use crate::error::{Error, Result};
use crate::generator::LatentImageGenerator;
use crate::latent::{draw_z, lerp, slerp, LatentSpace, LatentZ};
use crate::perceptual::ImageDistance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathLengthConfig {
    pub space: LatentSpace,
    pub epsilon: f64,
    pub samples: usize,
    /// Draw `t ∈ {0, 1}` instead of `t ~ U(0, 1)`.
    pub endpoints_only: bool,
    pub crop: bool,
    pub crop_fraction: f64,
    pub metric: String,
    pub seed: u64,
}

impl Default for PathLengthConfig {
    fn default() -> Self {
        Self {
            space: LatentSpace::Z,
            epsilon: 1e-4,
            samples: 10_000,
            endpoints_only: false,
            crop: false,
            crop_fraction: crate::perceptual::DEFAULT_CROP_FRACTION,
            metric: "proxy".into(),
            seed: 0,
        }
    }
}

impl PathLengthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        Ok(())
    }

    /// The distance metric named by this config, crop applied.
    pub fn distance(&self) -> Result<Box<dyn ImageDistance>> {
        crate::perceptual::distance_by_name(&self.metric, self.crop.then_some(self.crop_fraction))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathLengthResult {
    pub space: LatentSpace,
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Average perceptual path length with endpoints drawn from the generator's
/// own prior.
pub fn perceptual_path_length(
    gen: &dyn LatentImageGenerator,
    cfg: &PathLengthConfig,
    metric: &dyn ImageDistance,
) -> Result<PathLengthResult> {
    let (dim, dist) = (gen.z_dim(), gen.z_distribution());
    perceptual_path_length_with(gen, cfg, metric, |rng| {
        (draw_z(rng, dim, dist), draw_z(rng, dim, dist))
    })
}

/// As [`perceptual_path_length`] with a caller-supplied endpoint sampler.
///
/// Sample `i` uses its own stream `i` of the config seed, so every sample is
/// independent of evaluation order. Both images of a pair share one noise
/// seed.
pub fn perceptual_path_length_with(
    gen: &dyn LatentImageGenerator,
    cfg: &PathLengthConfig,
    metric: &dyn ImageDistance,
    endpoints: impl Fn(&mut ChaCha8Rng) -> (LatentZ, LatentZ),
) -> Result<PathLengthResult> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut values = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let (z1, z2) = endpoints(&mut rng);
        let t = if cfg.endpoints_only {
            if rng.random::<bool>() {
                1.0
            } else {
                0.0
            }
        } else {
            rng.random::<f64>()
        };
        let noise_seed: u64 = rng.random();
        let (a, b) = match cfg.space {
            LatentSpace::Z => {
                let za = slerp(&z1, &z2, t)?.latent;
                let zb = slerp(&z1, &z2, t + eps)?.latent;
                (gen.generate(&za, noise_seed)?, gen.generate(&zb, noise_seed)?)
            }
            LatentSpace::W => {
                let (w1, w2) = (gen.map(&z1)?, gen.map(&z2)?);
                (
                    gen.synthesize_w(&lerp(&w1, &w2, t)?, noise_seed)?,
                    gen.synthesize_w(&lerp(&w1, &w2, t + eps)?, noise_seed)?,
                )
            }
        };
        let d = metric.distance(&a, &b)? / (eps * eps);
        if !d.is_finite() {
            return Err(Error::NonFinite(format!(
                "path length sample {i} (seed {}, t {t}, noise seed {noise_seed}): distance {d}",
                cfg.seed
            )));
        }
        values.push(d);
    }
    let (mean, std_error) = mean_and_stderr(&values);
    Ok(PathLengthResult {
        space: cfg.space,
        mean,
        std_error,
        samples: cfg.samples,
    })
}
