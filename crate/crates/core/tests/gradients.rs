mod common;

use common::*;
use stylegan::config::InputKind;
use stylegan::nn::Parameters;
use stylegan::training::{Adam, AdamConfig};
use stylegan::{Generator, GeneratorConfig};

const TOL: f64 = 1e-4;

fn assert_report(what: &str, r: &GradReport) {
    assert!(r.checked > 0, "{what}: nothing checked");
    assert!(r.max_rel <= TOL, "{what}: max rel err {:.3e} at {}", r.max_rel, r.worst);
}

#[test]
fn adain_backward_matches_finite_differences() {
    assert_report("adain", &adain_grad_check(20));
}

#[test]
fn noise_strength_gradient_matches_finite_differences() {
    assert_report("noise", &noise_grad_check());
}

#[test]
fn generator_parameter_gradients_by_group() {
    let cfg = tiny_config();
    for (group, filter) in [
        ("mapping", Box::new(|n: &str| n.starts_with("mapping")) as Box<dyn Fn(&str) -> bool>),
        ("affine", Box::new(|n: &str| n.contains("affine"))),
        ("noise_strength", Box::new(|n: &str| n.contains("noise_strength"))),
        ("conv", Box::new(|n: &str| n.contains("conv") || n.contains("const") || n.contains("to_rgb"))),
    ] {
        for p_mix in [0.0, 1.0] {
            let r = generator_grad_check(&cfg, p_mix, &filter);
            assert_report(&format!("{group} p_mix={p_mix}"), &r);
        }
    }
}

#[test]
fn gradients_hold_across_ablation_presets() {
    for preset in ["a", "b", "c", "d"] {
        let cfg = GeneratorConfig {
            resolution: 8,
            z_dim: 6,
            w_dim: 6,
            mapping_depth: if preset <= "b" { 0 } else { 2 },
            base_channels: 6,
            min_channels: 4,
            ..GeneratorConfig::preset(preset).unwrap()
        };
        let r = generator_grad_check(&cfg, 0.5, |_| true);
        assert_report(preset, &r);
    }
}

#[test]
fn r1_parameter_gradient_is_exact() {
    for mbstd in [false, true] {
        assert_report(&format!("r1 mbstd={mbstd}"), &r1_grad_check(mbstd, 10.0));
    }
}

#[test]
fn mapping_learning_rate_is_hundredfold_smaller() {
    let cfg = tiny_config();
    let mut gen = Generator::<f64>::init(&cfg, 0).unwrap();
    let refs = gen.param_refs();
    for p in &refs {
        let expected = if p.name.starts_with("mapping") { 0.01 } else { 1.0 };
        assert_eq!(p.lr_mul, expected, "{}", p.name);
    }
    let before = gen.clone();
    let mut grads = gen.zeros_like();
    for t in grads.param_tensors_mut() {
        t.fill(1.0);
    }
    let mut adam = Adam::new(AdamConfig::default(), &gen);
    adam.update(&mut gen, &grads);
    let moved = |name: &str| -> f64 {
        let i = before.param_refs().iter().position(|p| p.name == name).unwrap();
        (before.param_refs()[i].tensor.data()[0] - gen.param_refs()[i].tensor.data()[0]).abs()
    };
    let ratio = moved("mapping.dense0.weight") / moved("synthesis.to_rgb.weight");
    assert!((ratio - 0.01).abs() < 1e-9, "ratio {ratio}");
}

#[test]
fn traditional_input_receives_gradient_through_first_slot() {
    let cfg = GeneratorConfig {
        input: InputKind::Latent,
        ..tiny_config()
    };
    let r = generator_grad_check(&cfg, 1.0, |n| n.contains("input") || n.starts_with("mapping"));
    assert_report("latent input", &r);
}
