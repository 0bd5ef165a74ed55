//! Seeded image generation, style-mixing grids and truncation sweeps.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::GeneratorConfig;
use crate::error::{Error, Result};
use crate::generator::LatentImageGenerator;
use crate::latent::{draw_z, estimate_w_center, truncate_w, LatentW, LatentZ, StyleSequence, TruncationParams};
use crate::tensor::Tensor;

const NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub const DEFAULT_PSI_GRID: [f64; 6] = [-1.0, -0.5, 0.0, 0.5, 0.7, 1.0];
/// Truncation applies to slots up to and including this resolution.
pub const DEFAULT_TRUNCATION_MAX_RESOLUTION: usize = 32;

pub fn latent_for_seed(gen: &dyn LatentImageGenerator, seed: u64) -> LatentZ {
    draw_z(&mut ChaCha8Rng::seed_from_u64(seed), gen.z_dim(), gen.z_distribution())
}

pub fn noise_seed_for(seed: u64) -> u64 {
    seed ^ NOISE_SALT
}

/// First slot left untruncated when truncating up to `max_resolution`.
pub fn truncation_cutoff(config: &GeneratorConfig, max_resolution: usize) -> usize {
    config.slot_for_resolution(2 * max_resolution)
}

pub fn w_center(gen: &dyn LatentImageGenerator, samples: usize, seed: u64) -> Result<LatentW> {
    estimate_w_center(|z| gen.map(z), gen.z_dim(), samples, seed)
}

/// One image per seed; `truncation` applies `(ψ, w̄, cutoff)` first.
pub fn generate_images(
    gen: &dyn LatentImageGenerator,
    seeds: &[u64],
    truncation: Option<&TruncationParams>,
) -> Result<Vec<Tensor<f64>>> {
    seeds
        .iter()
        .map(|&s| {
            let w = gen.map(&latent_for_seed(gen, s))?;
            let mut styles = StyleSequence::broadcast(&w, gen.style_slots());
            if let Some(t) = truncation {
                styles = truncate_w(&styles, t)?;
            }
            gen.synthesize(&styles, noise_seed_for(s))
        })
        .collect()
}

/// Coarse, middle and fine slot ranges: the resolution levels split into
/// three contiguous groups, coarse first, sizes as even as possible.
pub fn style_groups(slots: usize) -> [Range<usize>; 3] {
    let levels = slots / 2;
    let coarse = levels.div_ceil(3);
    let middle = (levels - coarse).div_ceil(2);
    let a = 2 * coarse;
    let b = 2 * (coarse + middle);
    [0..a, a..b, b..slots]
}

/// Mixing sheet: first row holds the source images, first column the
/// destinations. Each destination appears once per non-empty style group;
/// cell `(d, s)` takes the destination's styles with that group copied from
/// the source.
pub fn mixing_grid(
    gen: &dyn LatentImageGenerator,
    sources: &[u64],
    destinations: &[u64],
) -> Result<Vec<Vec<Option<Tensor<f64>>>>> {
    if sources.is_empty() || destinations.is_empty() {
        return Err(Error::InvalidArgument("mixing grid needs sources and destinations".into()));
    }
    let slots = gen.style_slots();
    let w_src: Vec<LatentW> = sources.iter().map(|&s| gen.map(&latent_for_seed(gen, s))).collect::<Result<_>>()?;
    let w_dst: Vec<LatentW> = destinations
        .iter()
        .map(|&s| gen.map(&latent_for_seed(gen, s)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut header = vec![None];
    for (w, &s) in w_src.iter().zip(sources) {
        header.push(Some(gen.synthesize_w(w, noise_seed_for(s))?));
    }
    rows.push(header);
    for group in style_groups(slots).into_iter().filter(|g| !g.is_empty()) {
        for (wd, &d) in w_dst.iter().zip(destinations) {
            let mut row = vec![Some(gen.synthesize_w(wd, noise_seed_for(d))?)];
            for ws in &w_src {
                let per_layer = (0..slots)
                    .map(|i| if group.contains(&i) { ws.clone() } else { wd.clone() })
                    .collect();
                row.push(Some(gen.synthesize(&StyleSequence { per_layer }, noise_seed_for(d))?));
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// One row per seed, one column per ψ.
pub fn truncation_sweep(
    gen: &dyn LatentImageGenerator,
    seeds: &[u64],
    psis: &[f64],
    w_bar: &LatentW,
    cutoff: usize,
) -> Result<Vec<Vec<Option<Tensor<f64>>>>> {
    seeds
        .iter()
        .map(|&s| {
            psis.iter()
                .map(|&psi| {
                    let t = TruncationParams {
                        psi,
                        w_bar: w_bar.clone(),
                        layer_cutoff: cutoff,
                    };
                    Ok(Some(generate_images(gen, &[s], Some(&t))?.remove(0)))
                })
                .collect()
        })
        .collect()
}
