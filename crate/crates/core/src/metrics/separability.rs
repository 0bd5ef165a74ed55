use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::GeneratorConfig;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::LatentImageGenerator;
use crate::latent::{draw_z, LatentSpace};
use crate::nn::ResampleKind;
use crate::tensor::Tensor;
use crate::training::{sigmoid, softplus, Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    /// Hinge-loss weight `C` in `C·Σ hinge + ½‖w‖²`.
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            epochs: 100,
            seed: 0,
        }
    }
}

/// Separating hyperplane; predicts `true` where `normal·x + offset > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub normal: Vec<f64>,
    pub offset: f64,
    /// Primal objective of the returned hyperplane after each epoch of the
    /// averaging window; non-increasing.
    pub objective_history: Vec<f64>,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.normal.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.offset
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }
}

fn svm_objective(normal: &[f64], offset: f64, points: &[Vec<f64>], signs: &[f64], c: f64) -> f64 {
    let reg = 0.5 * normal.iter().map(|w| w * w).sum::<f64>();
    let hinge: f64 = points
        .iter()
        .zip(signs)
        .map(|(x, &y)| {
            let f = normal.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + offset;
            (1.0 - y * f).max(0.0)
        })
        .sum();
    c * hinge + reg
}

/// Minimizes the objective on the segment from `(w, b)` towards
/// `(w + dw, b + db)` by golden-section search over `γ ∈ [0, 1]`, never
/// returning a point worse than `γ = 0`.
fn segment_minimum(
    w: &[f64],
    b: f64,
    dw: &[f64],
    db: f64,
    points: &[Vec<f64>],
    signs: &[f64],
    c: f64,
) -> f64 {
    let dot = |a: &[f64], x: &[f64]| a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    let base: Vec<f64> = points.iter().zip(signs).map(|(x, &y)| y * (dot(w, x) + b)).collect();
    let slope: Vec<f64> = points.iter().zip(signs).map(|(x, &y)| y * (dot(dw, x) + db)).collect();
    let (ww, wd, dd) = (dot(w, w), dot(w, dw), dot(dw, dw));
    let f = |g: f64| -> f64 {
        let hinge: f64 = base.iter().zip(&slope).map(|(m, s)| (1.0 - m - g * s).max(0.0)).sum();
        0.5 * (ww + 2.0 * g * wd + g * g * dd) + c * hinge
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, 1.0);
    let (mut x1, mut x2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            hi = x2;
            (x2, f2) = (x1, f1);
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            (x1, f1) = (x2, f2);
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let g = 0.5 * (lo + hi);
    [(0.0, f(0.0)), (1.0, f(1.0)), (g, f(g))]
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0.0, |(g, _)| g)
}

/// Soft-margin linear SVM by stochastic subgradient descent on
/// `C·Σ hinge + ½‖w‖²`, rescaled to `λ/2·‖w‖² + mean hinge` with
/// `λ = 1/(C·n)` and step `1/(λ(t + n))`. The offset is not regularized.
///
/// Iterates of the second half of the epochs are averaged. The returned
/// hyperplane starts at the first averaged iterate and after each later
/// epoch moves towards the running average by an exact line search, so its
/// objective never increases.
pub fn fit_linear_svm(points: &[Vec<f64>], labels: &[bool], cfg: &SvmConfig) -> Result<LinearSvm> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            actual: labels.len(),
        });
    }
    if !(cfg.c > 0.0) || cfg.epochs == 0 {
        return Err(Error::Config("SVM needs c > 0 and at least one epoch".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Degenerate("SVM training data has a single class".into()));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: p.len(),
        });
    }
    let n = points.len();
    let signs: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let lambda = 1.0 / (cfg.c * n as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let (mut avg_w, mut avg_b, mut averaged) = (vec![0.0; dim], 0.0, 0.0f64);
    let (mut held_w, mut held_b) = (vec![0.0; dim], 0.0);
    let average_from = cfg.epochs / 2;
    let mut history = Vec::new();
    let mut t = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * (t + n) as f64);
            let (x, y) = (&points[i], signs[i]);
            let margin = y * (w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b);
            let shrink = 1.0 - eta * lambda;
            for (wj, &xj) in w.iter_mut().zip(x) {
                *wj *= shrink;
                if margin < 1.0 {
                    *wj += eta * y * xj;
                }
            }
            if margin < 1.0 {
                b += eta * y;
            }
            if epoch >= average_from {
                averaged += 1.0;
                let k = 1.0 / averaged;
                for (a, &v) in avg_w.iter_mut().zip(&w) {
                    *a += k * (v - *a);
                }
                avg_b += k * (b - avg_b);
            }
        }
        if epoch == average_from {
            held_w.clone_from(&avg_w);
            held_b = avg_b;
        } else if epoch > average_from {
            let dw: Vec<f64> = avg_w.iter().zip(&held_w).map(|(a, h)| a - h).collect();
            let db = avg_b - held_b;
            let g = segment_minimum(&held_w, held_b, &dw, db, points, &signs, cfg.c);
            for (h, d) in held_w.iter_mut().zip(&dw) {
                *h += g * d;
            }
            held_b += g * db;
        }
        if epoch >= average_from {
            history.push(svm_objective(&held_w, held_b, points, &signs, cfg.c));
        }
    }
    Ok(LinearSvm {
        normal: held_w,
        offset: held_b,
        objective_history: history,
    })
}

/// `H(Y|X)` in bits from the empirical 2×2 table, with `0·log 0 = 0`.
pub fn conditional_entropy(predicted: &[bool], truth: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: predicted.len(),
            actual: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::InvalidArgument("conditional entropy of an empty table".into()));
    }
    let mut table = [[0usize; 2]; 2];
    for (&x, &y) in predicted.iter().zip(truth) {
        table[usize::from(x)][usize::from(y)] += 1;
    }
    let n = predicted.len() as f64;
    let mut h = 0.0;
    for row in &table {
        let nx = (row[0] + row[1]) as f64;
        for &nxy in row {
            if nxy > 0 {
                let nxy = nxy as f64;
                h -= nxy / n * (nxy / nx).log2();
            }
        }
    }
    Ok(h.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparabilityConfig {
    pub space: LatentSpace,
    /// Generated pool size; the most confident half is kept.
    pub pool: usize,
    pub svm: SvmConfig,
    pub seed: u64,
}

impl Default for SeparabilityConfig {
    fn default() -> Self {
        Self {
            space: LatentSpace::W,
            pool: 20_000,
            svm: SvmConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeResult {
    pub name: String,
    /// `None` when the attribute was skipped.
    pub entropy_bits: Option<f64>,
    pub kept: usize,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityResult {
    pub space: LatentSpace,
    /// `exp(Σ_i H(Y_i|X_i))` with entropies in bits.
    pub score: f64,
    pub attributes: Vec<AttributeResult>,
}

/// Separability from precomputed classifier logits: keep the most confident
/// half by `|sigmoid(logit) − 0.5|`, fit a linear SVM on the latents and
/// measure `H(Y|X)` between its predictions and the classifier labels.
pub fn separability_from_scores(
    latents: &[Vec<f64>],
    attributes: &[(String, Vec<f64>)],
    cfg: &SeparabilityConfig,
) -> Result<SeparabilityResult> {
    let mut results = Vec::with_capacity(attributes.len());
    let mut total = 0.0;
    for (name, logits) in attributes {
        if logits.len() != latents.len() {
            return Err(Error::DimensionMismatch {
                expected: latents.len(),
                actual: logits.len(),
            });
        }
        let mut idx: Vec<usize> = (0..logits.len()).collect();
        let conf = |i: usize| (sigmoid(logits[i]) - 0.5).abs();
        idx.sort_by(|&a, &b| conf(b).total_cmp(&conf(a)).then(a.cmp(&b)));
        idx.truncate(logits.len() / 2);
        let points: Vec<Vec<f64>> = idx.iter().map(|&i| latents[i].clone()).collect();
        let labels: Vec<bool> = idx.iter().map(|&i| logits[i] > 0.0).collect();
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 || positives == labels.len() {
            log::warn!("separability: attribute `{name}` has a single class after filtering; skipped");
            results.push(AttributeResult {
                name: name.clone(),
                entropy_bits: None,
                kept: labels.len(),
                skipped: Some("single class after confidence filtering".into()),
            });
            continue;
        }
        let svm = fit_linear_svm(&points, &labels, &cfg.svm)?;
        let predicted: Vec<bool> = points.iter().map(|p| svm.predict(p)).collect();
        let h = conditional_entropy(&predicted, &labels)?;
        total += h;
        results.push(AttributeResult {
            name: name.clone(),
            entropy_bits: Some(h),
            kept: labels.len(),
            skipped: None,
        });
    }
    Ok(SeparabilityResult {
        space: cfg.space,
        score: total.exp(),
        attributes: results,
    })
}

/// Binary attribute classifier with the discriminator architecture and no
/// minibatch standard deviation. Outputs a logit.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeClassifier {
    pub name: String,
    /// Architecture the network was built from.
    pub arch: GeneratorConfig,
    pub net: Discriminator<f32>,
}

impl AttributeClassifier {
    pub fn logits(&self, images: &[Tensor<f32>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            out.extend(self.net.scores(chunk)?.into_iter().map(f64::from));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Training length in images.
    pub images: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            images: 20_000,
            base_channels: 16,
            seed: 0,
        }
    }
}

/// Trains a classifier for `labels` on `images` (`[C, R, R]`, values in
/// `[-1, 1]`) with binary cross-entropy.
pub fn train_attribute_classifier(
    name: &str,
    images: &[Tensor<f32>],
    labels: &[bool],
    cfg: &ClassifierConfig,
) -> Result<AttributeClassifier> {
    if images.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: images.len(),
            actual: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if images.is_empty() || positives == 0 || positives == labels.len() {
        return Err(Error::Degenerate(format!("attribute `{name}` needs both labels present")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let first = &images[0];
    let arch = GeneratorConfig {
        resolution: first.height(),
        image_channels: first.channels(),
        base_channels: cfg.base_channels,
        min_channels: (cfg.base_channels / 4).max(1),
        resample: ResampleKind::Binomial,
        ..GeneratorConfig::default()
    };
    arch.validate()?;
    let mut net: Discriminator<f32> = Discriminator::init(&arch, false, cfg.seed)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &net,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let steps = cfg.images.div_ceil(cfg.batch_size);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            batch.push(images[i].clone());
            targets.push(labels[i]);
        }
        let trace = net.forward(&batch)?;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let g: Vec<f32> = trace
            .scores
            .iter()
            .zip(&targets)
            .map(|(&s, &y)| {
                let s = f64::from(s);
                loss += if y { softplus(-s) } else { softplus(s) };
                ((sigmoid(s) - f64::from(u8::from(y))) / n) as f32
            })
            .collect();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("classifier `{name}` loss at step {step}")));
        }
        let mut grads = net.zeros_like();
        net.backward(&trace, &g, Some(&mut grads), false);
        opt.update(&mut net, &grads);
    }
    Ok(AttributeClassifier {
        name: name.to_string(),
        arch,
        net,
    })
}

/// Generates a pool from the generator's prior, labels it with each
/// classifier and scores the chosen latent space. Sample `i` draws from its
/// own stream `i` of the seed.
pub fn separability_score(
    gen: &dyn LatentImageGenerator,
    classifiers: &[AttributeClassifier],
    cfg: &SeparabilityConfig,
) -> Result<SeparabilityResult> {
    if cfg.pool < 2 {
        return Err(Error::Config("separability pool must hold at least 2 samples".into()));
    }
    let (dim, dist) = (gen.z_dim(), gen.z_distribution());
    let mut latents = Vec::with_capacity(cfg.pool);
    let mut logits = vec![Vec::with_capacity(cfg.pool); classifiers.len()];
    let mut chunk = Vec::new();
    let flush = |chunk: &mut Vec<Tensor<f32>>, logits: &mut Vec<Vec<f64>>| -> Result<()> {
        for (c, out) in classifiers.iter().zip(logits.iter_mut()) {
            out.extend(c.logits(chunk)?);
        }
        chunk.clear();
        Ok(())
    };
    for i in 0..cfg.pool {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let z = draw_z(&mut rng, dim, dist);
        let noise_seed: u64 = rng.random();
        let w = gen.map(&z)?;
        chunk.push(gen.synthesize_w(&w, noise_seed)?.cast());
        latents.push(match cfg.space {
            LatentSpace::Z => z.0,
            LatentSpace::W => w.0,
        });
        if chunk.len() == 64 {
            flush(&mut chunk, &mut logits)?;
        }
    }
    flush(&mut chunk, &mut logits)?;
    let named: Vec<(String, Vec<f64>)> = classifiers.iter().map(|c| c.name.clone()).zip(logits).collect();
    separability_from_scores(&latents, &named, cfg)
}
