use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::ZDistribution;
use crate::nn::ResampleKind;

/// Where the synthesis network gets its 4×4 starting tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// A fully-connected input layer consumes the first style slot's latent.
    Latent,
    /// A learned constant tensor; the latent only enters through styles.
    Constant,
}

/// Architecture flags. The presets [`GeneratorConfig::preset`] map the
/// ablation ladder A–F onto these flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_depth: usize,
    pub mapping_final_activation: bool,
    pub mapping_lr_mul: f64,
    pub input: InputKind,
    pub styles: bool,
    pub noise: bool,
    /// Channels at 4×4; halved per doubling of resolution.
    pub base_channels: usize,
    pub min_channels: usize,
    pub image_channels: usize,
    pub resample: ResampleKind,
    pub z_distribution: ZDistribution,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            z_dim: 64,
            w_dim: 64,
            mapping_depth: 8,
            mapping_final_activation: true,
            mapping_lr_mul: 0.01,
            input: InputKind::Constant,
            styles: true,
            noise: true,
            base_channels: 64,
            min_channels: 8,
            image_channels: 3,
            resample: ResampleKind::Binomial,
            z_distribution: ZDistribution::Hypersphere,
        }
    }
}

impl GeneratorConfig {
    /// Architecture for one of `a`..`f` (also accepts `config_a` etc.).
    pub fn preset(name: &str) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase();
        let key = key.strip_prefix("config_").unwrap_or(&key);
        let base = Self::default();
        let cfg = match key {
            "a" => Self {
                mapping_depth: 0,
                input: InputKind::Latent,
                styles: false,
                noise: false,
                resample: ResampleKind::Nearest,
                ..base
            },
            "b" => Self {
                mapping_depth: 0,
                input: InputKind::Latent,
                styles: false,
                noise: false,
                ..base
            },
            "c" => Self {
                input: InputKind::Latent,
                noise: false,
                ..base
            },
            "d" => Self {
                noise: false,
                ..base
            },
            "e" | "f" => base,
            other => return Err(Error::UnknownName(other.to_string())),
        };
        Ok(cfg)
    }

    pub fn levels(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 1
    }

    pub fn channels_at_level(&self, level: usize) -> usize {
        (self.base_channels >> level).max(self.min_channels)
    }

    pub fn resolution_at_level(&self, level: usize) -> usize {
        4 << level
    }

    /// Number of style inputs (two per resolution level).
    pub fn style_slots(&self) -> usize {
        2 * self.levels()
    }

    pub fn site_channels(&self, site: usize) -> usize {
        self.channels_at_level(site / 2)
    }

    pub fn site_resolution(&self, site: usize) -> usize {
        self.resolution_at_level(site / 2)
    }

    /// First style slot at or beyond the given resolution.
    pub fn slot_for_resolution(&self, resolution: usize) -> usize {
        let mut slot = 0;
        while slot < self.style_slots() && self.site_resolution(slot) < resolution {
            slot += 1;
        }
        slot
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution must be a power of two >= 4, got {}",
                self.resolution
            )));
        }
        if self.z_dim == 0 || self.w_dim == 0 {
            return Err(Error::Config("latent dimensions must be positive".into()));
        }
        if self.mapping_depth == 0 && self.z_dim != self.w_dim {
            return Err(Error::Config(
                "an identity mapping needs z_dim == w_dim".into(),
            ));
        }
        if self.input == InputKind::Constant && !self.styles {
            return Err(Error::Config(
                "constant input without styles ignores the latent entirely".into(),
            ));
        }
        if self.base_channels == 0 || self.min_channels == 0 || self.image_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.mapping_lr_mul > 0.0) {
            return Err(Error::Config("mapping_lr_mul must be positive".into()));
        }
        Ok(())
    }
}
