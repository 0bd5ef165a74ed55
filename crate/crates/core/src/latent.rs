//! Input latent space Z, intermediate latent space W, interpolation and the
//! truncation trick.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Point in the input latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentZ(pub Vec<f64>);

/// Point in the intermediate latent space. Never normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentW(pub Vec<f64>);

impl LatentZ {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl LatentW {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// How `z ~ P(z)` is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZDistribution {
    /// Standard Gaussian projected onto the unit hypersphere.
    #[default]
    Hypersphere,
    /// Raw standard Gaussian.
    Gaussian,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws one latent from an existing stream.
pub fn draw_z<R: Rng>(rng: &mut R, dim: usize, dist: ZDistribution) -> LatentZ {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    if dist == ZDistribution::Hypersphere {
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        } else {
            v[0] = 1.0;
        }
    }
    LatentZ(v)
}

/// `count` unit-norm latents; a pure function of `(seed, count, dim)`.
pub fn sample_z(seed: u64, count: usize, dim: usize) -> Vec<LatentZ> {
    sample_z_with(seed, count, dim, ZDistribution::Hypersphere)
}

pub fn sample_z_with(seed: u64, count: usize, dim: usize, dist: ZDistribution) -> Vec<LatentZ> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| draw_z(&mut rng, dim, dist)).collect()
}

/// Spherical interpolation result. `degenerate` marks the fallback to
/// normalized linear interpolation for (anti)parallel endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Slerp {
    pub latent: LatentZ,
    pub degenerate: bool,
}

pub const SLERP_DEGENERATE_SIN: f64 = 1e-6;

/// Great-circle interpolation. `t` outside `[0, 1]` extrapolates along the
/// same circle.
pub fn slerp(z1: &LatentZ, z2: &LatentZ, t: f64) -> Result<Slerp> {
    check_dims(z1.dim(), z2.dim())?;
    let (a, b) = (&z1.0, &z2.0);
    let (na, nb) = (norm(a), norm(b));
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let sin = omega.sin();
    if sin.abs() < SLERP_DEGENERATE_SIN {
        let mut v: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
        let n = norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        return Ok(Slerp {
            latent: LatentZ(v),
            degenerate: true,
        });
    }
    let ka = ((1.0 - t) * omega).sin() / sin;
    let kb = (t * omega).sin() / sin;
    Ok(Slerp {
        latent: LatentZ(a.iter().zip(b).map(|(x, y)| ka * x + kb * y).collect()),
        degenerate: false,
    })
}

/// `(1 − t)·w1 + t·w2`, evaluated as `w1 + t·(w2 − w1)` so equal endpoints
/// stay exact.
pub fn lerp(w1: &LatentW, w2: &LatentW, t: f64) -> Result<LatentW> {
    check_dims(w1.dim(), w2.dim())?;
    Ok(LatentW(
        w1.0.iter().zip(&w2.0).map(|(a, b)| a + t * (b - a)).collect(),
    ))
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

/// Arithmetic mean of `mapper(z)` over `sample_count` fresh latents.
pub fn estimate_w_center(
    mapper: impl Fn(&LatentZ) -> Result<LatentW>,
    z_dim: usize,
    sample_count: usize,
    seed: u64,
) -> Result<LatentW> {
    if sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum: Vec<f64> = Vec::new();
    for _ in 0..sample_count {
        let w = mapper(&draw_z(&mut rng, z_dim, ZDistribution::Hypersphere))?;
        if sum.is_empty() {
            sum = w.0;
        } else {
            check_dims(sum.len(), w.dim())?;
            sum.iter_mut().zip(&w.0).for_each(|(s, v)| *s += v);
        }
    }
    let n = sample_count as f64;
    Ok(LatentW(sum.into_iter().map(|s| s / n).collect()))
}

/// Per-slot assignment of `w` vectors to the synthesis network's style inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSequence {
    pub per_layer: Vec<LatentW>,
}

impl StyleSequence {
    pub fn broadcast(w: &LatentW, slots: usize) -> Self {
        Self {
            per_layer: vec![w.clone(); slots],
        }
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }
}

/// Slots `[0, crossover)` take `w1`, the rest take `w2`.
pub fn mixed_style_sequence(
    w1: &LatentW,
    w2: &LatentW,
    crossover: usize,
    slots: usize,
) -> Result<StyleSequence> {
    if crossover > slots {
        return Err(Error::OutOfRange {
            index: crossover,
            len: slots,
        });
    }
    check_dims(w1.dim(), w2.dim())?;
    Ok(StyleSequence {
        per_layer: (0..slots)
            .map(|i| if i < crossover { w1.clone() } else { w2.clone() })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruncationParams {
    pub psi: f64,
    pub w_bar: LatentW,
    /// Slots with index `< layer_cutoff` are truncated.
    pub layer_cutoff: usize,
}

/// `w' = w̄ + ψ (w − w̄)` on slots below the cutoff; later slots are cloned
/// untouched.
pub fn truncate_w(styles: &StyleSequence, params: &TruncationParams) -> Result<StyleSequence> {
    if params.layer_cutoff > styles.len() {
        return Err(Error::OutOfRange {
            index: params.layer_cutoff,
            len: styles.len(),
        });
    }
    let psi = params.psi;
    let per_layer = styles
        .per_layer
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if i < params.layer_cutoff {
                check_dims(params.w_bar.dim(), w.dim())?;
                Ok(LatentW(
                    w.0.iter()
                        .zip(&params.w_bar.0)
                        .map(|(v, c)| c + psi * (v - c))
                        .collect(),
                ))
            } else {
                Ok(w.clone())
            }
        })
        .collect::<Result<_>>()?;
    Ok(StyleSequence { per_layer })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSpace {
    Z,
    W,
}

impl LatentSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Z => "z",
            Self::W => "w",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSidecar {
    pub dim: usize,
    pub space: LatentSpace,
    pub seed: u64,
    #[serde(default)]
    pub count: usize,
}

/// Writes latents as a flat little-endian `f32` array at `path` plus a JSON
/// sidecar at `path` + `.json`.
pub fn save_latents(path: &Path, vectors: &[Vec<f64>], space: LatentSpace, seed: u64) -> Result<()> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut bytes = Vec::with_capacity(vectors.len() * dim * 4);
    for v in vectors {
        check_dims(dim, v.len())?;
        for &x in v {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).at(path)?;
    let sidecar = LatentSidecar {
        dim,
        space,
        seed,
        count: vectors.len(),
    };
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_vec_pretty(&sidecar)?).at(&side_path)?;
    Ok(())
}

pub fn load_latents(path: &Path) -> Result<(LatentSidecar, Vec<Vec<f64>>)> {
    let side_path = sidecar_path(path);
    let sidecar: LatentSidecar = serde_json::from_slice(&std::fs::read(&side_path).at(&side_path)?)?;
    let bytes = std::fs::read(path).at(path)?;
    if sidecar.dim == 0 || bytes.len() % (4 * sidecar.dim) != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} bytes is not a whole number of {}-dim f32 vectors",
            bytes.len(),
            sidecar.dim
        )));
    }
    let vectors = bytes
        .chunks_exact(4 * sidecar.dim)
        .map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect()
        })
        .collect();
    Ok((sidecar, vectors))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sample_z_is_deterministic_and_unit_norm() {
        let a = sample_z(7, 2, 16);
        let b = sample_z(7, 2, 16);
        assert_eq!(a, b);
        for v in &a {
            assert!((v.norm() - 1.0).abs() < 1e-6);
        }
        assert_ne!(sample_z(8, 2, 16), a);
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let z1 = LatentZ(vec![1.0, 0.0]);
        let z2 = LatentZ(vec![0.0, 1.0]);
        assert_eq!(slerp(&z1, &z2, 0.0).unwrap().latent, z1);
        let end = slerp(&z1, &z2, 1.0).unwrap().latent;
        assert!((end.0[0]).abs() < 1e-15 && (end.0[1] - 1.0).abs() < 1e-15);
        let mid = slerp(&z1, &z2, 0.5).unwrap();
        let h = 2f64.sqrt() / 2.0;
        assert!(!mid.degenerate);
        assert!((mid.latent.0[0] - h).abs() < 1e-12 && (mid.latent.0[1] - h).abs() < 1e-12);
    }

    #[test]
    fn slerp_parallel_falls_back() {
        let z = LatentZ(vec![0.6, 0.8]);
        let s = slerp(&z, &z, 0.3).unwrap();
        assert!(s.degenerate);
        assert!((s.latent.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lerp_examples() {
        let w1 = LatentW(vec![0.0, 0.0]);
        let w2 = LatentW(vec![2.0, 4.0]);
        assert_eq!(lerp(&w1, &w2, 0.0).unwrap(), w1);
        assert_eq!(lerp(&w1, &w2, 0.25).unwrap(), LatentW(vec![0.5, 1.0]));
        let w = LatentW(vec![1.5, -3.0]);
        for t in [0.0, 0.3, 1.0, 1.0001] {
            assert_eq!(lerp(&w, &w, t).unwrap(), w);
        }
        assert!(lerp(&w1, &LatentW(vec![1.0]), 0.5).is_err());
    }

    #[test]
    fn w_center_constant_and_single_sample() {
        let c = LatentW(vec![1.0, -2.0, 0.5]);
        let got = estimate_w_center(|_| Ok(c.clone()), 3, 17, 3).unwrap();
        assert_eq!(got, c);
        let single = estimate_w_center(|z| Ok(LatentW(z.0.clone())), 5, 1, 11).unwrap();
        assert_eq!(single.0, sample_z(11, 1, 5)[0].0);
        assert!(estimate_w_center(|z| Ok(LatentW(z.0.clone())), 5, 0, 11).is_err());
    }

    #[test]
    fn w_center_of_sphere_shrinks() {
        // Mean of n uniform unit vectors in d dims has E‖m‖² = 1/n.
        let d = 8;
        let n = 1_000_000;
        let m = estimate_w_center(|z| Ok(LatentW(z.0.clone())), d, n, 5).unwrap();
        let r = norm(&m.0);
        // d·n·‖m‖² is approximately χ²_d: mean d, std sqrt(2d). Allow 3σ.
        let bound = (d as f64 + 3.0 * (2.0 * d as f64).sqrt()) / (d as f64 * n as f64);
        assert!(r * r < bound, "norm {r}");
    }

    #[test]
    fn truncation_examples() {
        let w = LatentW(vec![2.0, 2.0]);
        let styles = StyleSequence::broadcast(&w, 4);
        let params = |psi, cutoff| TruncationParams {
            psi,
            w_bar: LatentW(vec![0.0, 0.0]),
            layer_cutoff: cutoff,
        };
        assert_eq!(truncate_w(&styles, &params(1.0, 2)).unwrap(), styles);
        let half = truncate_w(&styles, &params(0.5, 4)).unwrap();
        assert!(half.per_layer.iter().all(|v| v.0 == vec![1.0, 1.0]));
        let zero = truncate_w(&styles, &params(0.0, 4)).unwrap();
        assert!(zero.per_layer.iter().all(|v| v.0 == vec![0.0, 0.0]));
        assert!(truncate_w(&styles, &params(0.5, 5)).is_err());
    }

    #[test]
    fn mixed_sequence_layout() {
        let w1 = LatentW(vec![1.0]);
        let w2 = LatentW(vec![2.0]);
        let s = mixed_style_sequence(&w1, &w2, 2, 4).unwrap();
        assert_eq!(s.per_layer, vec![w1.clone(), w1.clone(), w2.clone(), w2.clone()]);
        assert!(mixed_style_sequence(&w1, &w2, 4, 4).unwrap().per_layer.iter().all(|w| *w == w1));
        assert!(mixed_style_sequence(&w1, &w2, 0, 4).unwrap().per_layer.iter().all(|w| *w == w2));
        assert!(mixed_style_sequence(&w1, &w2, 5, 4).is_err());
    }

    #[test]
    fn latent_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.bin");
        let vs: Vec<Vec<f64>> = sample_z(1, 3, 4).into_iter().map(|z| z.0).collect();
        save_latents(&path, &vs, LatentSpace::Z, 1).unwrap();
        let (side, back) = load_latents(&path).unwrap();
        assert_eq!(side.dim, 4);
        assert_eq!(side.space, LatentSpace::Z);
        for (a, b) in vs.iter().zip(&back) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(raw.len(), 3 * 4 * 4);
        assert_eq!(f32::from_le_bytes(raw[..4].try_into().unwrap()), vs[0][0] as f32);
    }

    fn unit_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (prop::collection::vec(-1.0f64..1.0, 6), prop::collection::vec(-1.0f64..1.0, 6))
            .prop_filter("nonzero", |(a, b)| norm(a) > 1e-3 && norm(b) > 1e-3)
            .prop_map(|(a, b)| {
                let (na, nb) = (norm(&a), norm(&b));
                (a.iter().map(|x| x / na).collect(), b.iter().map(|x| x / nb).collect())
            })
    }

    proptest! {
        #[test]
        fn slerp_keeps_unit_norm_and_is_symmetric((a, b) in unit_pair(), t in 0.0f64..=1.0) {
            let (z1, z2) = (LatentZ(a), LatentZ(b));
            let s = slerp(&z1, &z2, t).unwrap().latent;
            prop_assert!((s.norm() - 1.0).abs() < 1e-6);
            let r = slerp(&z2, &z1, 1.0 - t).unwrap().latent;
            for (x, y) in s.0.iter().zip(&r.0) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn truncation_is_affine_in_psi(
            ws in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 5),
            bar in prop::collection::vec(-1.0f64..1.0, 3),
            psi in -1.5f64..1.5,
            cutoff in 0usize..=5,
        ) {
            let styles = StyleSequence { per_layer: ws.into_iter().map(LatentW).collect() };
            let params = |psi| TruncationParams { psi, w_bar: LatentW(bar.clone()), layer_cutoff: cutoff };
            let out = truncate_w(&styles, &params(psi)).unwrap();
            let one = truncate_w(&styles, &params(1.0)).unwrap();
            for (i, (o, r)) in out.per_layer.iter().zip(&one.per_layer).enumerate() {
                if i >= cutoff {
                    prop_assert_eq!(o, &styles.per_layer[i]);
                    continue;
                }
                for ((ov, rv), c) in o.0.iter().zip(&r.0).zip(&bar) {
                    prop_assert!((ov - (c + psi * (rv - c))).abs() < 1e-12);
                }
            }
        }
    }
}
