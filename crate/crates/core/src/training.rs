//! Adversarial training: losses, Adam, generator EMA and the alternating
//! discriminator/generator step with style-mixing regularization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{input_penalty_param_grad, Discriminator};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::latent::draw_z;
use crate::mapping::MappingTrace;
use crate::nn::Parameters;
use crate::scalar::{Element, Real};
use crate::synthesis::{NoiseMaps, SynthesisTrace};
use crate::tensor::Tensor;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Non-saturating generator loss `softplus(−D(G(z)))`.
pub fn nonsat_g_loss(d_score_on_fake: f64) -> f64 {
    softplus(-d_score_on_fake)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn check_batches(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    Ok(())
}

/// Squared Euclidean norm of a flattened input gradient.
pub fn grad_sq_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum()
}

/// `mean softplus(−D(x_real)) + mean softplus(D(x_fake)) + γ/2 · mean ‖∇_x D(x_real)‖²`.
pub fn nonsat_d_loss_r1(
    scores_real: &[f64],
    scores_fake: &[f64],
    grad_real: &[Vec<f64>],
    gamma: f64,
) -> Result<f64> {
    check_batches(scores_real.len(), scores_fake.len())?;
    check_batches(scores_real.len(), grad_real.len())?;
    let real: Vec<f64> = scores_real.iter().map(|&s| softplus(-s)).collect();
    let fake: Vec<f64> = scores_fake.iter().map(|&s| softplus(s)).collect();
    let r1: Vec<f64> = grad_real.iter().map(|g| grad_sq_norm(g)).collect();
    Ok(mean(&real) + mean(&fake) + 0.5 * gamma * mean(&r1))
}

/// `mean D(fake) − mean D(real) + λ · mean (‖∇D(x̂)‖ − 1)² + drift · mean D(real)²`.
pub fn wgan_gp_d_loss(
    scores_real: &[f64],
    scores_fake: &[f64],
    interpolate_grads: &[Vec<f64>],
    lambda_gp: f64,
    drift: f64,
) -> Result<f64> {
    check_batches(scores_real.len(), scores_fake.len())?;
    check_batches(scores_real.len(), interpolate_grads.len())?;
    let gp: Vec<f64> = interpolate_grads
        .iter()
        .map(|g| (grad_sq_norm(g).sqrt() - 1.0).powi(2))
        .collect();
    let sq: Vec<f64> = scores_real.iter().map(|s| s * s).collect();
    Ok(mean(scores_fake) - mean(scores_real) + lambda_gp * mean(&gp) + drift * mean(&sq))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    NonsatR1,
    WganGp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// R1 weight γ.
    pub r1_gamma: f64,
    pub gp_lambda: f64,
    pub gp_drift: f64,
    pub mixing_prob: f64,
    pub batch_size: usize,
    pub g_optimizer: AdamConfig,
    pub d_optimizer: AdamConfig,
    pub ema_decay: f64,
    pub minibatch_stddev: bool,
    pub total_images: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::NonsatR1,
            r1_gamma: 10.0,
            gp_lambda: 10.0,
            gp_drift: 1e-3,
            mixing_prob: 0.9,
            batch_size: 16,
            g_optimizer: AdamConfig::default(),
            d_optimizer: AdamConfig::default(),
            ema_decay: 0.999,
            minibatch_stddev: true,
            total_images: 200_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r1_gamma >= 0.0) || !(self.gp_lambda >= 0.0) {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mixing_prob) {
            return Err(Error::Config(format!(
                "mixing_prob must lie in [0, 1], got {}",
                self.mixing_prob
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Adam with per-tensor learning-rate multipliers taken from the
/// parameters' `lr_mul`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: Parameters<T>>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Tensor<T>> = params.param_refs().iter().map(|p| p.tensor.zeros_like()).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr_muls: Vec<f64> = params.param_refs().iter().map(|p| p.lr_mul).collect();
        let grad_refs = grads.param_refs();
        for (i, p) in params.param_tensors_mut().into_iter().enumerate() {
            let lr = c.lr * lr_muls[i];
            let g = grad_refs[i].tensor.data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].re();
                let mj = c.beta1 * m[j].re() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j].re() + (1.0 - c.beta2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let delta = lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                *pv = T::from_f64(pv.re() - delta);
            }
        }
    }
}

/// `ema ← β·ema + (1 − β)·params`, elementwise.
pub fn update_ema<T: Real, P: Parameters<T>>(ema: &mut P, params: &P, decay: f64) -> Result<()> {
    let src = params.param_refs();
    let dst = ema.param_tensors_mut();
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} EMA tensors vs {} parameter tensors",
            dst.len(),
            src.len()
        )));
    }
    for (e, p) in dst.into_iter().zip(&src) {
        if e.shape() != p.tensor.shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", e.shape(), p.tensor.shape())));
        }
        if decay == 1.0 {
            continue;
        }
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.tensor.data()) {
            *ev = T::from_f64(decay * ev.re() + (1.0 - decay) * pv.re());
        }
    }
    Ok(())
}

/// A generated training image together with everything its backward pass
/// needs.
pub struct FakeSample<T> {
    pub crossover: Option<usize>,
    pub styles: Vec<Vec<T>>,
    pub noise: NoiseMaps<T>,
    map_traces: Vec<MappingTrace<T>>,
    pub trace: SynthesisTrace<T>,
}

impl<T: Real> FakeSample<T> {
    pub fn image(&self) -> &Tensor<T> {
        &self.trace.image
    }
}

/// Draws latents, mixing decision and noise from `rng` and runs the
/// generator. With probability `mixing_prob` a second latent takes over at a
/// crossover drawn uniformly from `1..L`.
pub fn sample_fake<T: Real, R: Rng>(gen: &Generator<T>, mixing_prob: f64, rng: &mut R) -> Result<FakeSample<T>> {
    let cfg = gen.config();
    let slots = gen.style_slots();
    let z1 = draw_z(rng, cfg.z_dim, cfg.z_distribution);
    let mixed = mixing_prob > 0.0 && slots > 1 && rng.random::<f64>() < mixing_prob;
    let mut map_traces = vec![gen.mapping.forward(&to_t(&z1.0))?];
    let crossover = if mixed {
        let z2 = draw_z(rng, cfg.z_dim, cfg.z_distribution);
        map_traces.push(gen.mapping.forward(&to_t(&z2.0))?);
        Some(rng.random_range(1..slots))
    } else {
        None
    };
    let styles: Vec<Vec<T>> = (0..slots)
        .map(|i| match crossover {
            Some(k) if i >= k => map_traces[1].output.clone(),
            _ => map_traces[0].output.clone(),
        })
        .collect();
    let noise = NoiseMaps::sample(cfg, rng);
    let trace = gen.synthesis.forward(&styles, &noise)?;
    Ok(FakeSample {
        crossover,
        styles,
        noise,
        map_traces,
        trace,
    })
}

fn to_t<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

/// Backpropagates an image gradient through synthesis and mapping.
pub fn generator_backward<T: Real>(
    gen: &Generator<T>,
    sample: &FakeSample<T>,
    g_image: &Tensor<T>,
    grads: &mut Generator<T>,
) {
    let sg = gen
        .synthesis
        .backward(&sample.styles, &sample.noise, &sample.trace, g_image, &mut grads.synthesis);
    let w_dim = gen.config().w_dim;
    let mut gw = vec![vec![T::zero(); w_dim]; sample.map_traces.len()];
    for (slot, g) in sg.styles.iter().enumerate() {
        let src = match sample.crossover {
            Some(k) if slot >= k => 1,
            _ => 0,
        };
        for (acc, &v) in gw[src].iter_mut().zip(g) {
            *acc += v;
        }
    }
    for (trace, g) in sample.map_traces.iter().zip(&gw) {
        gen.mapping.backward(trace, g, &mut grads.mapping);
    }
}

/// Scalar diagnostics from one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub images_seen: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Mean squared input-gradient norm on reals (R1) or the gradient
    /// penalty term (WGAN-GP).
    pub r1: f64,
    pub mixed_fraction: f64,
}

/// All mutable training state. Bit-reproducible given the config seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub gen: Generator<T>,
    pub gen_ema: Generator<T>,
    pub disc: Discriminator<T>,
    pub g_opt: Adam<T>,
    pub d_opt: Adam<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub images_seen: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(gen_config: &crate::config::GeneratorConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let gen = Generator::init(gen_config, config.seed)?;
        let disc = Discriminator::init(gen_config, config.minibatch_stddev, config.seed ^ 0x5eed_d15c)?;
        Ok(Self::from_parts(config, gen, disc))
    }

    pub fn from_parts(config: TrainConfig, gen: Generator<T>, disc: Discriminator<T>) -> Self {
        let g_opt = Adam::new(config.g_optimizer.clone(), &gen);
        let d_opt = Adam::new(config.d_optimizer.clone(), &disc);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        Self {
            gen_ema: gen.clone(),
            config,
            gen,
            disc,
            g_opt,
            d_opt,
            rng,
            step: 0,
            images_seen: 0,
        }
    }

    fn fakes(&mut self, n: usize) -> Result<Vec<FakeSample<T>>> {
        (0..n)
            .map(|_| sample_fake(&self.gen, self.config.mixing_prob, &mut self.rng))
            .collect()
    }

    /// One discriminator update followed by one generator update and an EMA
    /// update. `reals` must already be augmented.
    pub fn train_step(&mut self, reals: &[Tensor<T>]) -> Result<StepLog> {
        let n = reals.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        let nf = n as f64;

        // Discriminator.
        let fakes = self.fakes(n)?;
        let fake_images: Vec<Tensor<T>> = fakes.iter().map(|f| f.image().clone()).collect();
        let real_trace = self.disc.forward(reals)?;
        let fake_trace = self.disc.forward(&fake_images)?;
        let sr: Vec<f64> = real_trace.scores.iter().map(|s| s.re()).collect();
        let sf: Vec<f64> = fake_trace.scores.iter().map(|s| s.re()).collect();
        let mut d_grads = self.disc.zeros_like();
        let (d_loss, penalty) = match self.config.loss {
            LossKind::NonsatR1 => {
                let gr: Vec<T> = sr.iter().map(|&s| T::from_f64(-sigmoid(-s) / nf)).collect();
                let gf: Vec<T> = sf.iter().map(|&s| T::from_f64(sigmoid(s) / nf)).collect();
                self.disc.backward(&real_trace, &gr, Some(&mut d_grads), false);
                self.disc.backward(&fake_trace, &gf, Some(&mut d_grads), false);
                let gamma = self.config.r1_gamma;
                let input_grads = self.disc.input_gradients(&real_trace, &vec![T::one(); n]);
                let flat: Vec<Vec<f64>> = input_grads.iter().map(|g| g.data().iter().map(|v| v.re()).collect()).collect();
                if gamma > 0.0 {
                    let direction: Vec<Tensor<T>> = input_grads
                        .iter()
                        .map(|g| g.map(|v| T::from_f64(gamma / nf * v.re())))
                        .collect();
                    let hvp = input_penalty_param_grad(&self.disc, reals, &direction)?;
                    add_grads(&mut d_grads, &hvp);
                }
                let r1 = mean(&flat.iter().map(|g| grad_sq_norm(g)).collect::<Vec<_>>());
                (nonsat_d_loss_r1(&sr, &sf, &flat, gamma)?, r1)
            }
            LossKind::WganGp => {
                let drift = self.config.gp_drift;
                let gr: Vec<T> = sr.iter().map(|&s| T::from_f64((-1.0 + 2.0 * drift * s) / nf)).collect();
                let gf: Vec<T> = vec![T::from_f64(1.0 / nf); n];
                self.disc.backward(&real_trace, &gr, Some(&mut d_grads), false);
                self.disc.backward(&fake_trace, &gf, Some(&mut d_grads), false);
                let interps: Vec<Tensor<T>> = reals
                    .iter()
                    .zip(&fake_images)
                    .map(|(r, f)| {
                        let u = T::from_f64(self.rng.random::<f64>());
                        let one_minus = T::one() - u;
                        Tensor::from_vec(
                            r.shape(),
                            r.data().iter().zip(f.data()).map(|(&a, &b)| u * a + one_minus * b).collect(),
                        )
                    })
                    .collect::<Result<_>>()?;
                let trace = self.disc.forward(&interps)?;
                let input_grads = self.disc.input_gradients(&trace, &vec![T::one(); n]);
                let flat: Vec<Vec<f64>> = input_grads.iter().map(|g| g.data().iter().map(|v| v.re()).collect()).collect();
                let lambda = self.config.gp_lambda;
                if lambda > 0.0 {
                    let direction: Vec<Tensor<T>> = input_grads
                        .iter()
                        .zip(&flat)
                        .map(|(g, f)| {
                            let norm = grad_sq_norm(f).sqrt();
                            let k = if norm > 0.0 { 2.0 * lambda / nf * (norm - 1.0) / norm } else { 0.0 };
                            g.map(|v| T::from_f64(k * v.re()))
                        })
                        .collect();
                    let hvp = input_penalty_param_grad(&self.disc, &interps, &direction)?;
                    add_grads(&mut d_grads, &hvp);
                }
                let gp = mean(&flat.iter().map(|g| (grad_sq_norm(g).sqrt() - 1.0).powi(2)).collect::<Vec<_>>());
                (wgan_gp_d_loss(&sr, &sf, &flat, lambda, drift)?, gp)
            }
        };
        if !d_loss.is_finite() || !grads_finite(&d_grads) {
            return Err(self.non_finite("discriminator", d_loss));
        }
        self.d_opt.update(&mut self.disc, &d_grads);

        // Generator.
        let fakes = self.fakes(n)?;
        let mixed = fakes.iter().filter(|f| f.crossover.is_some()).count();
        let images: Vec<Tensor<T>> = fakes.iter().map(|f| f.image().clone()).collect();
        let trace = self.disc.forward(&images)?;
        let s: Vec<f64> = trace.scores.iter().map(|v| v.re()).collect();
        let (g_loss, g_scores): (f64, Vec<T>) = match self.config.loss {
            LossKind::NonsatR1 => (
                mean(&s.iter().map(|&v| nonsat_g_loss(v)).collect::<Vec<_>>()),
                s.iter().map(|&v| T::from_f64(-sigmoid(-v) / nf)).collect(),
            ),
            LossKind::WganGp => (-mean(&s), vec![T::from_f64(-1.0 / nf); n]),
        };
        let g_images = self.disc.input_gradients(&trace, &g_scores);
        let mut g_grads = self.gen.zeros_like();
        for (sample, gi) in fakes.iter().zip(&g_images) {
            generator_backward(&self.gen, sample, gi, &mut g_grads);
        }
        if !g_loss.is_finite() || !grads_finite(&g_grads) {
            return Err(self.non_finite("generator", g_loss));
        }
        self.g_opt.update(&mut self.gen, &g_grads);
        update_ema(&mut self.gen_ema, &self.gen, self.config.ema_decay)?;

        self.step += 1;
        self.images_seen += n as u64;
        Ok(StepLog {
            step: self.step,
            images_seen: self.images_seen,
            d_loss,
            g_loss,
            r1: penalty,
            mixed_fraction: mixed as f64 / nf,
        })
    }

    fn non_finite(&self, phase: &str, loss: f64) -> Error {
        let norms = |refs: Vec<crate::nn::ParamRef<'_, T>>| -> String {
            refs.iter()
                .map(|p| format!("{}={:.4e}", p.name, p.tensor.sum_sq().sqrt()))
                .collect::<Vec<_>>()
                .join(", ")
        };
        Error::NonFinite(format!(
            "{phase} loss {loss} at step {} (images_seen {}); generator norms [{}]; discriminator norms [{}]",
            self.step,
            self.images_seen,
            norms(self.gen.param_refs()),
            norms(self.disc.param_refs()),
        ))
    }
}

fn add_grads<T: Real, P: Parameters<T>>(acc: &mut P, other: &P) {
    let refs = other.param_refs();
    for (a, b) in acc.param_tensors_mut().into_iter().zip(&refs) {
        a.add_assign(b.tensor);
    }
}

fn grads_finite<T: Real, P: Parameters<T>>(grads: &P) -> bool {
    grads.param_refs().iter().all(|p| p.tensor.all_finite())
}
