use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stylegan::latent::{LatentSpace, ZDistribution};
use stylegan::metrics::{
    conditional_entropy, extract_features, fid, fit_linear_svm, perceptual_path_length, perceptual_path_length_with,
    separability_from_scores, PathLengthConfig, SeparabilityConfig, SvmConfig, FEATURE_DIM,
};
use stylegan::perceptual::{ImageDistance, ProxyDistance, SquaredL2};
use stylegan::{Generator, GeneratorConfig, LatentImageGenerator, LatentW, LatentZ, Result, StyleSequence, Tensor};

/// `G(w) = scale · A w` reshaped to a `[1, 2, k]` image; `map` is the
/// identity unless `square_map` is set.
struct LinearGen {
    a: Vec<Vec<f64>>,
    scale: f64,
    dist: ZDistribution,
}

impl LinearGen {
    fn identity2() -> Self {
        Self {
            a: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            scale: 1.0,
            dist: ZDistribution::Hypersphere,
        }
    }

    fn random(dim: usize, pixels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            a: (0..pixels).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect(),
            scale: 1.0,
            dist: ZDistribution::Gaussian,
        }
    }
}

impl LatentImageGenerator for LinearGen {
    fn z_dim(&self) -> usize {
        self.a[0].len()
    }
    fn style_slots(&self) -> usize {
        1
    }
    fn z_distribution(&self) -> ZDistribution {
        self.dist
    }
    fn map(&self, z: &LatentZ) -> Result<LatentW> {
        Ok(LatentW(z.0.clone()))
    }
    fn synthesize(&self, styles: &StyleSequence, _noise_seed: u64) -> Result<Tensor<f64>> {
        let w = &styles.per_layer[0].0;
        let px: Vec<f64> = self
            .a
            .iter()
            .map(|row| self.scale * row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Tensor::from_vec(&[1, 1, px.len()], px)
    }
}

struct ConstantGen;

impl LatentImageGenerator for ConstantGen {
    fn z_dim(&self) -> usize {
        4
    }
    fn style_slots(&self) -> usize {
        2
    }
    fn map(&self, z: &LatentZ) -> Result<LatentW> {
        Ok(LatentW(z.0.iter().map(|v| v * 2.0).collect()))
    }
    fn synthesize(&self, _: &StyleSequence, _: u64) -> Result<Tensor<f64>> {
        Ok(Tensor::full(&[3, 8, 8], 0.25))
    }
}

fn cfg(space: LatentSpace, samples: usize) -> PathLengthConfig {
    PathLengthConfig {
        space,
        samples,
        metric: "squared_l2".into(),
        ..PathLengthConfig::default()
    }
}

fn orthogonal_pair(rng: &mut ChaCha8Rng) -> (LatentZ, LatentZ) {
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (
        LatentZ(vec![phi.cos(), phi.sin()]),
        LatentZ(vec![-phi.sin(), phi.cos()]),
    )
}

/// Mean squared speed of the great-circle path, by trapezoidal quadrature of
/// finite-difference speeds computed from the textbook slerp formula.
fn slerp_energy_by_quadrature(z1: &[f64], z2: &[f64]) -> f64 {
    let omega = (z1[0] * z2[0] + z1[1] * z2[1]).clamp(-1.0, 1.0).acos();
    let at = |t: f64| -> [f64; 2] {
        let (a, b) = (((1.0 - t) * omega).sin() / omega.sin(), (t * omega).sin() / omega.sin());
        [a * z1[0] + b * z2[0], a * z1[1] + b * z2[1]]
    };
    let n = 2000;
    let h = 1e-6;
    let speed2 = |t: f64| {
        let (p, q) = (at(t - h), at(t + h));
        ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)) / (4.0 * h * h)
    };
    let mut acc = 0.0;
    for i in 0..=n {
        let t = (i as f64 / n as f64).clamp(h, 1.0 - h);
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += w * speed2(t);
    }
    acc / n as f64
}

#[test]
fn unit_circle_path_length() {
    let r = perceptual_path_length_with(&LinearGen::identity2(), &cfg(LatentSpace::Z, 10_000), &SquaredL2, orthogonal_pair)
        .unwrap();
    let quad = slerp_energy_by_quadrature(&[1.0, 0.0], &[0.0, 1.0]);
    let exact = std::f64::consts::PI.powi(2) / 4.0;
    assert!((quad - exact).abs() / exact < 1e-6, "quadrature {quad}");
    assert!((r.mean - exact).abs() / exact < 0.01, "l_Z {}", r.mean);
}

#[test]
fn constant_generator_has_zero_path_length() {
    for space in [LatentSpace::Z, LatentSpace::W] {
        let c = PathLengthConfig {
            samples: 200,
            ..cfg(space, 200)
        };
        for metric in [Box::new(SquaredL2) as Box<dyn ImageDistance>, Box::new(ProxyDistance::default())] {
            let r = perceptual_path_length(&ConstantGen, &c, metric.as_ref()).unwrap();
            assert_eq!(r.mean, 0.0);
            assert_eq!(r.std_error, 0.0);
        }
    }
}

#[test]
fn scaling_outputs_scales_path_length_quadratically() {
    let mut g = LinearGen::random(4, 6, 1);
    let c = PathLengthConfig {
        metric: "proxy".into(),
        ..cfg(LatentSpace::Z, 50)
    };
    let proxy = ProxyDistance::default();
    let base = perceptual_path_length(&g, &c, &proxy).unwrap().mean;
    g.scale = 3.0;
    let scaled = perceptual_path_length(&g, &c, &proxy).unwrap().mean;
    assert!((scaled / base - 9.0).abs() < 1e-6, "{}", scaled / base);
}

#[test]
fn linear_generator_endpoint_and_full_path_agree() {
    let g = LinearGen::random(5, 7, 2);
    for metric in [Box::new(ProxyDistance::default()) as Box<dyn ImageDistance>, Box::new(SquaredL2)] {
        let full = PathLengthConfig {
            metric: metric.name(),
            ..cfg(LatentSpace::W, 300)
        };
        let ends = PathLengthConfig {
            endpoints_only: true,
            ..full.clone()
        };
        let a = perceptual_path_length(&g, &full, metric.as_ref()).unwrap().mean;
        let b = perceptual_path_length(&g, &ends, metric.as_ref()).unwrap().mean;
        assert!((a - b).abs() <= 1e-8 * a, "{a} vs {b}");
    }
}

#[test]
fn path_length_is_reproducible_and_self_consistent() {
    let gcfg = GeneratorConfig {
        resolution: 8,
        z_dim: 8,
        w_dim: 8,
        mapping_depth: 2,
        base_channels: 8,
        min_channels: 4,
        ..GeneratorConfig::default()
    };
    let g: Generator<f64> = Generator::init(&gcfg, 4).unwrap();
    let proxy = ProxyDistance::default();
    for space in [LatentSpace::Z, LatentSpace::W] {
        let c = PathLengthConfig {
            metric: "proxy".into(),
            ..cfg(space, 400)
        };
        let a = perceptual_path_length(&g, &c, &proxy).unwrap();
        let again = perceptual_path_length(&g, &c, &proxy).unwrap();
        assert_eq!(a.mean.to_bits(), again.mean.to_bits());
        let doubled = perceptual_path_length(&g, &PathLengthConfig { samples: 800, ..c }, &proxy).unwrap();
        assert!(
            (doubled.mean - a.mean).abs() < 3.0 * a.std_error,
            "{space:?}: {} vs {} (se {})",
            a.mean,
            doubled.mean,
            a.std_error
        );
    }
}

#[test]
fn crop_and_bad_configs() {
    let c = PathLengthConfig {
        epsilon: 0.0,
        ..cfg(LatentSpace::Z, 5)
    };
    assert!(perceptual_path_length(&ConstantGen, &c, &SquaredL2).is_err());
    let c = PathLengthConfig {
        samples: 0,
        ..cfg(LatentSpace::Z, 5)
    };
    assert!(perceptual_path_length(&ConstantGen, &c, &SquaredL2).is_err());
}

fn gaussian_set(n: usize, d: usize, mean: f64, sd: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fid_is_symmetric_and_non_negative(seed in 0u64..1000, d in 1usize..6, shift in -2.0f64..2.0) {
        let a = gaussian_set(40, d, 0.0, 1.0, seed);
        let b = gaussian_set(30, d, shift, 1.5, seed + 7);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.abs().max(1.0));
        prop_assert!(ab >= -1e-6);
        prop_assert!(fid(&a, &a).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn fid_of_translated_copy_is_squared_shift(seed in 0u64..1000, c in proptest::collection::vec(-3.0f64..3.0, 3)) {
        let a = gaussian_set(25, 3, 0.0, 1.0, seed);
        let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().zip(&c).map(|(x, s)| x + s).collect()).collect();
        let expected: f64 = c.iter().map(|s| s * s).sum();
        prop_assert!((fid(&a, &b).unwrap() - expected).abs() <= 1e-6 * expected.max(1.0));
    }

    #[test]
    fn distances_are_symmetric_and_vanish_on_the_diagonal(seed in 0u64..1000, k in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::from_fn(&[3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(&[3, 8, 8], |_| rng.random_range(-1.0..1.0));
        for m in [Box::new(SquaredL2) as Box<dyn ImageDistance>, Box::new(ProxyDistance::default())] {
            prop_assert_eq!(m.distance(&a, &a).unwrap(), 0.0);
            let ab = m.distance(&a, &b).unwrap();
            prop_assert!(ab > 0.0);
            prop_assert!((ab - m.distance(&b, &a).unwrap()).abs() <= 1e-12 * ab);
            prop_assert!(m.is_quadratic());
            let far = Tensor::<f64>::from_fn(&[3, 8, 8], |i| a.data()[i] + k * (b.data()[i] - a.data()[i]));
            prop_assert!((m.distance(&a, &far).unwrap() / ab - k * k).abs() <= 1e-9 * k * k);
        }
    }

    #[test]
    fn entropy_is_bounded(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
        let (x, y): (Vec<bool>, Vec<bool>) = bits.into_iter().unzip();
        let h = conditional_entropy(&x, &y).unwrap();
        let p = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
        let hy = if p == 0.0 || p == 1.0 { 0.0 } else { -(p * p.log2() + (1.0 - p) * (1.0 - p).log2()) };
        prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
        prop_assert!(h <= hy + 1e-12);
        let flipped: Vec<bool> = x.iter().map(|v| !v).collect();
        prop_assert!((conditional_entropy(&flipped, &y).unwrap() - h).abs() < 1e-12);
        prop_assert_eq!(conditional_entropy(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn separability_ignores_attribute_order(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents: Vec<Vec<f64>> = (0..120).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let a: Vec<f64> = latents.iter().map(|v| 4.0 * v[0] + rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = latents.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let cfg = SeparabilityConfig { svm: SvmConfig { epochs: 20, ..SvmConfig::default() }, ..SeparabilityConfig::default() };
        let ab = separability_from_scores(&latents, &[("a".into(), a.clone()), ("b".into(), b.clone())], &cfg).unwrap();
        let ba = separability_from_scores(&latents, &[("b".into(), b), ("a".into(), a)], &cfg).unwrap();
        prop_assert!((ab.score - ba.score).abs() < 1e-12);
        prop_assert!(ab.score >= 1.0);
    }
}

#[test]
fn svm_objective_decreases_after_averaging_starts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points: Vec<Vec<f64>> = (0..400).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let labels: Vec<bool> = points
        .iter()
        .map(|p| p[0] - 0.5 * p[1] + 0.3 * rng.sample::<f64, _>(StandardNormal) > 0.0)
        .collect();
    let svm = fit_linear_svm(&points, &labels, &SvmConfig::default()).unwrap();
    let h = &svm.objective_history;
    assert!(h.len() >= 10);
    for w in h.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "objective rose: {:?}", h);
    }
}

#[test]
fn features_are_per_image_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imgs: Vec<Tensor<f64>> = (0..5)
        .map(|_| Tensor::from_fn(&[3, 32, 32], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let f = extract_features(&imgs, "random-conv").unwrap();
    assert_eq!(f.len(), 5);
    assert!(f.iter().all(|v| v.len() == FEATURE_DIM));
    assert_eq!(f, extract_features(&imgs, "random-conv").unwrap());
    let reversed: Vec<Tensor<f64>> = imgs.iter().rev().cloned().collect();
    let g = extract_features(&reversed, "random-conv").unwrap();
    assert!(f.iter().rev().eq(g.iter()));
    assert!(extract_features(&imgs, "inception").is_err());
    assert!(extract_features(&[], "random-conv").is_err());
}
