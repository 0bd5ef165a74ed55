#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylegan::discriminator::{input_penalty_param_grad, Discriminator};
use stylegan::nn::{adain, adain_backward, apply_noise, apply_noise_strength_grad, Parameters, StyleVector};
use stylegan::training::{generator_backward, sample_fake};
use stylegan::{Generator, GeneratorConfig, Tensor};

pub const FD_STEP: f64 = 1e-5;
/// Gradients below `GRAD_FLOOR · max(1, |L|)` are compared absolutely;
/// central differences carry round-off of order `ε_mach·|L| / h` there.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub floor: f64,
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn absorb(&mut self, name: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric, self.floor.max(GRAD_FLOOR));
        if e >= self.max_rel {
            self.max_rel = e;
            self.worst = format!("{name}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        if other.max_rel >= self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst.clone();
        }
    }
}

/// Central differences of `loss` against `analytic` for every scalar of
/// every parameter tensor whose name passes `filter`.
pub fn check_params<P: Parameters<f64> + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
    filter: impl Fn(&str) -> bool,
) -> GradReport {
    let names: Vec<(String, usize)> = params.param_refs().iter().map(|p| (p.name.clone(), p.tensor.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.param_refs().iter().map(|p| p.tensor.data().to_vec()).collect();
    let mut work = params.clone();
    let mut report = GradReport {
        floor: GRAD_FLOOR * loss(params).abs().max(1.0),
        ..GradReport::default()
    };
    for (t, (name, len)) in names.iter().enumerate() {
        if !filter(name) {
            continue;
        }
        for j in 0..*len {
            let orig = work.param_tensors_mut()[t].data()[j];
            work.param_tensors_mut()[t].data_mut()[j] = orig + FD_STEP;
            let up = loss(&work);
            work.param_tensors_mut()[t].data_mut()[j] = orig - FD_STEP;
            let down = loss(&work);
            work.param_tensors_mut()[t].data_mut()[j] = orig;
            report.absorb(&format!("{name}[{j}]"), grads[t][j], (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}

/// Small generator: 8×8 RGB, two levels, four style slots.
pub fn tiny_config() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 8,
        z_dim: 6,
        w_dim: 6,
        mapping_depth: 2,
        base_channels: 6,
        min_channels: 4,
        image_channels: 3,
        ..GeneratorConfig::default()
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Fresh generator with non-zero noise strengths and biases so every
/// path carries gradient, and a non-constant input tensor (AdaIN is not
/// differentiable at zero-variance channels).
pub fn perturbed_generator(cfg: &GeneratorConfig, seed: u64) -> Generator<f64> {
    let mut g = Generator::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let names: Vec<String> = g.param_refs().iter().map(|p| p.name.clone()).collect();
    for (t, name) in g.param_tensors_mut().into_iter().zip(&names) {
        if name.ends_with("bias") || name.ends_with("noise_strength") || name.ends_with("const") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    g
}

/// `L = Σ r ⊙ G(z)` over a few samples drawn with a fixed seed; mixing
/// and noise are re-drawn identically for each evaluation.
pub fn generator_grad_check(cfg: &GeneratorConfig, mixing_prob: f64, filter: impl Fn(&str) -> bool) -> GradReport {
    let gen = perturbed_generator(cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = cfg.resolution;
    let weights: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&[cfg.image_channels, r, r], &mut rng)).collect();
    let loss = |g: &Generator<f64>| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        weights
            .iter()
            .map(|wt| {
                let s = sample_fake(g, mixing_prob, &mut rng).unwrap();
                s.image().data().iter().zip(wt.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    };
    let mut grads = gen.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for wt in &weights {
        let s = sample_fake(&gen, mixing_prob, &mut rng).unwrap();
        generator_backward(&gen, &s, wt, &mut grads);
    }
    check_params(&gen, &grads, loss, filter)
}

/// Parameter gradient of `γ/(2n) Σ ‖∇ₓD(xᵢ)‖²` against central differences.
pub fn r1_grad_check(mbstd: bool, gamma: f64) -> GradReport {
    let cfg = GeneratorConfig {
        base_channels: 4,
        min_channels: 3,
        ..tiny_config()
    };
    let disc = Discriminator::<f64>::init(&cfg, mbstd, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&[3, 8, 8], &mut rng)).collect();
    let n = xs.len() as f64;
    let penalty = |d: &Discriminator<f64>| -> f64 {
        let trace = d.forward(&xs).unwrap();
        let g = d.input_gradients(&trace, &vec![1.0; xs.len()]);
        0.5 * gamma / n * g.iter().map(|t| t.sum_sq()).sum::<f64>()
    };
    let trace = disc.forward(&xs).unwrap();
    let g = disc.input_gradients(&trace, &vec![1.0; xs.len()]);
    let direction: Vec<Tensor<f64>> = g.iter().map(|t| t.map(|v| gamma / n * v)).collect();
    let analytic = input_penalty_param_grad(&disc, &xs, &direction).unwrap();
    check_params(&disc, &analytic, penalty, |_| true)
}

/// AdaIN input and style gradients over `cases` random 3×4×4 inputs.
pub fn adain_grad_check(cases: usize) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut report = GradReport::default();
    for _ in 0..cases {
        let x = random_tensor(&[3, 4, 4], &mut rng);
        let style = StyleVector {
            scale: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
            bias: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let gy = random_tensor(&[3, 4, 4], &mut rng);
        let f = |x: &Tensor<f64>, s: &StyleVector<f64>| -> f64 {
            adain(x, s).unwrap().data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let (gx, gs) = adain_backward(&x, &style, &gy);
        for j in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[j] += FD_STEP;
            let mut m = x.clone();
            m.data_mut()[j] -= FD_STEP;
            report.absorb(&format!("x[{j}]"), gx.data()[j], (f(&p, &style) - f(&m, &style)) / (2.0 * FD_STEP));
        }
        for c in 0..3 {
            for (which, analytic) in [(0, gs.scale[c]), (1, gs.bias[c])] {
                let mut p = style.clone();
                let mut m = style.clone();
                let (pp, mm) = if which == 0 {
                    (&mut p.scale[c], &mut m.scale[c])
                } else {
                    (&mut p.bias[c], &mut m.bias[c])
                };
                *pp += FD_STEP;
                *mm -= FD_STEP;
                report.absorb("style", analytic, (f(&x, &p) - f(&x, &m)) / (2.0 * FD_STEP));
            }
        }
    }
    report
}

pub fn noise_grad_check() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&[4, 5, 5], &mut rng);
    let noise = random_tensor(&[1, 5, 5], &mut rng);
    let gy = random_tensor(&[4, 5, 5], &mut rng);
    let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |s: &[f64]| -> f64 {
        apply_noise(&x, &noise, s).unwrap().data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
    };
    let g = apply_noise_strength_grad(&gy, &noise);
    let mut report = GradReport::default();
    for c in 0..4 {
        let mut p = s.clone();
        p[c] += FD_STEP;
        let mut m = s.clone();
        m[c] -= FD_STEP;
        report.absorb("strength", g[c], (f(&p) - f(&m)) / (2.0 * FD_STEP));
    }
    report
}

pub fn print_criterion(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}
