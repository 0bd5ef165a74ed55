//! Convolutional discriminator mirroring the generator's resolution schedule,
//! with an optional minibatch standard-deviation feature. The same network
//! without that feature serves as the attribute classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GeneratorConfig;
use crate::error::{Error, Result};
use crate::nn::{
    join, leaky_relu, leaky_relu_grad, resample, resample_backward, Conv2d, Dense, Direction, ParamRef,
    Parameters, ResampleKind,
};
use crate::scalar::{Dual, Real};
use crate::tensor::Tensor;

const MBSTD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub resolution: usize,
    pub image_channels: usize,
    pub resample: ResampleKind,
    pub mbstd: bool,
    pub from_rgb: Conv2d<T>,
    /// Highest resolution first; each block halves the resolution.
    pub blocks: Vec<DiscriminatorBlock<T>>,
    pub final_conv: Conv2d<T>,
    pub dense: Dense<T>,
    pub out: Dense<T>,
}

#[derive(Clone, Debug)]
struct BlockTrace<T> {
    input: Tensor<T>,
    pre1: Tensor<T>,
    act1: Tensor<T>,
    pre2: Tensor<T>,
}

#[derive(Clone, Debug)]
struct SampleTrace<T> {
    image: Tensor<T>,
    rgb_pre: Tensor<T>,
    blocks: Vec<BlockTrace<T>>,
    head_in: Tensor<T>,
    final_pre: Tensor<T>,
    flat: Vec<T>,
    dense_pre: Vec<T>,
    dense_act: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorTrace<T> {
    samples: Vec<SampleTrace<T>>,
    /// Trunk outputs at 4×4 before the minibatch feature is appended.
    trunk: Vec<Tensor<T>>,
    mbstd_sd: Vec<T>,
    pub scores: Vec<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn init(config: &GeneratorConfig, mbstd: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::init_with(config, mbstd, &mut rng))
    }

    pub fn init_with<R: Rng>(config: &GeneratorConfig, mbstd: bool, rng: &mut R) -> Self {
        let levels = config.levels();
        let top = config.channels_at_level(levels - 1);
        let from_rgb = Conv2d::init(config.image_channels, top, 1, 2f64.sqrt(), rng);
        let blocks = (1..levels)
            .rev()
            .map(|level| {
                let c = config.channels_at_level(level);
                let next = config.channels_at_level(level - 1);
                DiscriminatorBlock {
                    conv1: Conv2d::init(c, c, 3, 2f64.sqrt(), rng),
                    conv2: Conv2d::init(c, next, 3, 2f64.sqrt(), rng),
                }
            })
            .collect();
        let c0 = config.channels_at_level(0);
        let final_conv = Conv2d::init(c0 + usize::from(mbstd), c0, 3, 2f64.sqrt(), rng);
        let dense = Dense::init(c0 * 16, c0, 2f64.sqrt(), rng);
        let out = Dense::init(c0, 1, 1.0, rng);
        Self {
            resolution: config.resolution,
            image_channels: config.image_channels,
            resample: config.resample,
            mbstd,
            from_rgb,
            blocks,
            final_conv,
            dense,
            out,
        }
    }

    /// Applies `f` to every parameter tensor, preserving the layout.
    pub fn map_tensors<U: Real>(&self, f: impl Fn(&Tensor<T>) -> Tensor<U>) -> Discriminator<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            weight: f(&c.weight),
            bias: f(&c.bias),
            scale: c.scale,
        };
        let dense = |d: &Dense<T>| Dense {
            weight: f(&d.weight),
            bias: f(&d.bias),
            scale: d.scale,
            lr_mul: d.lr_mul,
        };
        Discriminator {
            resolution: self.resolution,
            image_channels: self.image_channels,
            resample: self.resample,
            mbstd: self.mbstd,
            from_rgb: conv(&self.from_rgb),
            blocks: self
                .blocks
                .iter()
                .map(|b| DiscriminatorBlock {
                    conv1: conv(&b.conv1),
                    conv2: conv(&b.conv2),
                })
                .collect(),
            final_conv: conv(&self.final_conv),
            dense: dense(&self.dense),
            out: dense(&self.out),
        }
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        self.map_tensors(Tensor::cast)
    }

    pub fn zeros_like(&self) -> Self {
        self.map_tensors(Tensor::zeros_like)
    }

    fn check_image(&self, x: &Tensor<T>) -> Result<()> {
        x.check_shape(&[self.image_channels, self.resolution, self.resolution])
    }

    pub fn forward(&self, images: &[Tensor<T>]) -> Result<DiscriminatorTrace<T>> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        let mut samples = Vec::with_capacity(images.len());
        let mut trunk = Vec::with_capacity(images.len());
        for image in images {
            self.check_image(image)?;
            let rgb_pre = self.from_rgb.forward(image)?;
            let mut x = rgb_pre.map(leaky_relu);
            let mut blocks = Vec::with_capacity(self.blocks.len());
            for block in &self.blocks {
                let pre1 = block.conv1.forward(&x)?;
                let act1 = pre1.map(leaky_relu);
                let pre2 = block.conv2.forward(&act1)?;
                let act2 = pre2.map(leaky_relu);
                let down = resample(&act2, self.resample, Direction::Down)?;
                blocks.push(BlockTrace {
                    input: std::mem::replace(&mut x, down),
                    pre1,
                    act1,
                    pre2,
                });
            }
            trunk.push(x);
            samples.push(SampleTrace {
                image: image.clone(),
                rgb_pre,
                blocks,
                head_in: Tensor::zeros(&[0]),
                final_pre: Tensor::zeros(&[0]),
                flat: Vec::new(),
                dense_pre: Vec::new(),
                dense_act: Vec::new(),
            });
        }
        let (mbstd_sd, stat) = if self.mbstd {
            minibatch_stddev(&trunk)
        } else {
            (Vec::new(), T::zero())
        };
        let mut scores = Vec::with_capacity(images.len());
        for (sample, h) in samples.iter_mut().zip(&trunk) {
            let head_in = if self.mbstd {
                let mut data = h.data().to_vec();
                data.extend(std::iter::repeat_n(stat, h.plane()));
                Tensor::from_vec(&[h.channels() + 1, h.height(), h.width()], data)?
            } else {
                h.clone()
            };
            let final_pre = self.final_conv.forward(&head_in)?;
            let flat: Vec<T> = final_pre.data().iter().map(|&v| leaky_relu(v)).collect();
            let dense_pre = self.dense.forward(&flat)?;
            let dense_act: Vec<T> = dense_pre.iter().map(|&v| leaky_relu(v)).collect();
            scores.push(self.out.forward(&dense_act)?[0]);
            sample.head_in = head_in;
            sample.final_pre = final_pre;
            sample.flat = flat;
            sample.dense_pre = dense_pre;
            sample.dense_act = dense_act;
        }
        Ok(DiscriminatorTrace {
            samples,
            trunk,
            mbstd_sd,
            scores,
        })
    }

    pub fn scores(&self, images: &[Tensor<T>]) -> Result<Vec<T>> {
        Ok(self.forward(images)?.scores)
    }

    /// Backpropagates per-sample score gradients. Accumulates parameter
    /// gradients into `grads` when given; returns per-image input gradients
    /// when `need_input_grad` is set (empty otherwise).
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace<T>,
        g_scores: &[T],
        mut grads: Option<&mut Discriminator<T>>,
        need_input_grad: bool,
    ) -> Vec<Tensor<T>> {
        let n = trace.samples.len();
        // Head, per sample.
        let mut g_trunk = Vec::with_capacity(n);
        let mut g_stat = T::zero();
        for (sample, &gs) in trace.samples.iter().zip(g_scores) {
            let g_act = self.out.backward(&sample.dense_act, &[gs], grads.as_deref_mut().map(|g| &mut g.out));
            let g_pre: Vec<T> = g_act
                .iter()
                .zip(&sample.dense_pre)
                .map(|(&g, &a)| leaky_relu_grad(a, g))
                .collect();
            let g_flat = self
                .dense
                .backward(&sample.flat, &g_pre, grads.as_deref_mut().map(|g| &mut g.dense));
            let g_final = Tensor::from_vec(
                sample.final_pre.shape(),
                g_flat
                    .iter()
                    .zip(sample.final_pre.data())
                    .map(|(&g, &a)| leaky_relu_grad(a, g))
                    .collect(),
            )
            .expect("shape preserved");
            let g_head = self
                .final_conv
                .backward(&sample.head_in, &g_final, grads.as_deref_mut().map(|g| &mut g.final_conv), true)
                .expect("input gradient requested");
            let trunk_len = sample.head_in.plane() * (sample.head_in.channels() - usize::from(self.mbstd));
            if self.mbstd {
                for &v in &g_head.data()[trunk_len..] {
                    g_stat += v;
                }
            }
            let shape = trace.trunk[0].shape().to_vec();
            g_trunk.push(Tensor::from_vec(&shape, g_head.data()[..trunk_len].to_vec()).expect("trunk shape"));
        }
        if self.mbstd {
            minibatch_stddev_backward(&trace.trunk, &trace.mbstd_sd, g_stat, &mut g_trunk);
        }
        // Trunk, per sample.
        let mut g_inputs = Vec::new();
        for (sample, mut g) in trace.samples.iter().zip(g_trunk) {
            for (bi, (block, bt)) in self.blocks.iter().zip(&sample.blocks).enumerate().rev() {
                let act2_shape = bt.pre2.shape().to_vec();
                let g_act2 = resample_backward(&g, &act2_shape, self.resample, Direction::Down);
                let g_pre2 = relu_back(&bt.pre2, g_act2);
                let gb = grads.as_deref_mut().map(|g| &mut g.blocks[bi]);
                let (g1, g2) = match gb {
                    Some(b) => (Some(&mut b.conv1), Some(&mut b.conv2)),
                    None => (None, None),
                };
                let g_act1 = block.conv2.backward(&bt.act1, &g_pre2, g2, true).expect("input gradient");
                let g_pre1 = relu_back(&bt.pre1, g_act1);
                g = block.conv1.backward(&bt.input, &g_pre1, g1, true).expect("input gradient");
            }
            let g_rgb = relu_back(&sample.rgb_pre, g);
            let gx = self.from_rgb.backward(
                &sample.image,
                &g_rgb,
                grads.as_deref_mut().map(|g| &mut g.from_rgb),
                need_input_grad,
            );
            if let Some(gx) = gx {
                g_inputs.push(gx);
            }
        }
        g_inputs
    }

    /// Input gradients of `Σ_i weights_i · D(x_i)`.
    pub fn input_gradients(&self, trace: &DiscriminatorTrace<T>, weights: &[T]) -> Vec<Tensor<T>> {
        self.backward(trace, weights, None, true)
    }
}

fn relu_back<T: Real>(pre: &Tensor<T>, mut g: Tensor<T>) -> Tensor<T> {
    for (gv, &a) in g.data_mut().iter_mut().zip(pre.data()) {
        *gv = leaky_relu_grad(a, *gv);
    }
    g
}

/// Per-position standard deviation over the batch, averaged to one scalar.
fn minibatch_stddev<T: Real>(xs: &[Tensor<T>]) -> (Vec<T>, T) {
    let n = T::from_f64(xs.len() as f64);
    let p = xs[0].len();
    let mut sd = vec![T::zero(); p];
    let mut stat = T::zero();
    for (i, s) in sd.iter_mut().enumerate() {
        let mut mean = T::zero();
        for x in xs {
            mean += x.data()[i];
        }
        mean = mean / n;
        let mut var = T::zero();
        for x in xs {
            let d = x.data()[i] - mean;
            var += d * d;
        }
        *s = (var / n + T::from_f64(MBSTD_EPS)).sqrt();
        stat += *s;
    }
    (sd, stat / T::from_f64(p as f64))
}

fn minibatch_stddev_backward<T: Real>(xs: &[Tensor<T>], sd: &[T], g_stat: T, g: &mut [Tensor<T>]) {
    let n = T::from_f64(xs.len() as f64);
    let p = T::from_f64(sd.len() as f64);
    for (i, &s) in sd.iter().enumerate() {
        let mut mean = T::zero();
        for x in xs {
            mean += x.data()[i];
        }
        mean = mean / n;
        let k = g_stat / (p * n * s);
        for (x, gx) in xs.iter().zip(g.iter_mut()) {
            gx.data_mut()[i] += k * (x.data()[i] - mean);
        }
    }
}

impl<T: Real> Parameters<T> for Discriminator<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.from_rgb.visit(&join(prefix, "from_rgb"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv1.visit(&join(prefix, &format!("block{i}.conv1")), out);
            b.conv2.visit(&join(prefix, &format!("block{i}.conv2")), out);
        }
        self.final_conv.visit(&join(prefix, "final_conv"), out);
        self.dense.visit(&join(prefix, "dense"), out);
        self.out.visit(&join(prefix, "out"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.from_rgb.visit_mut(out);
        for b in &mut self.blocks {
            b.conv1.visit_mut(out);
            b.conv2.visit_mut(out);
        }
        self.final_conv.visit_mut(out);
        self.dense.visit_mut(out);
        self.out.visit_mut(out);
    }
}

/// Parameter gradient of a penalty on the discriminator's input gradient.
///
/// With `S(θ) = Σ_i D(x_i; θ)`, `g = ∂S/∂x` and a penalty `P(g)`, the chain
/// rule gives `∂P/∂θ = (∂g/∂θ)ᵀ ∂P/∂g`, the mixed second derivative of `S`
/// contracted with `v = ∂P/∂g`. It is computed exactly by running the
/// parameter backward pass on dual-number inputs `x + ε v`.
pub fn input_penalty_param_grad<T: Real>(
    disc: &Discriminator<T>,
    inputs: &[Tensor<T>],
    direction: &[Tensor<T>],
) -> Result<Discriminator<T>> {
    let dual: Discriminator<Dual<T>> = disc.map_tensors(|t| t.map(Dual::constant));
    let xs: Vec<Tensor<Dual<T>>> = inputs
        .iter()
        .zip(direction)
        .map(|(x, v)| {
            Tensor::from_vec(
                x.shape(),
                x.data().iter().zip(v.data()).map(|(&a, &b)| Dual::new(a, b)).collect(),
            )
        })
        .collect::<Result<_>>()?;
    let trace = dual.forward(&xs)?;
    let mut grads = dual.zeros_like();
    let ones = vec![Dual::one(); xs.len()];
    dual.backward(&trace, &ones, Some(&mut grads), false);
    Ok(grads.map_tensors(|t| t.map(|d| d.du)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 8,
            base_channels: 4,
            min_channels: 2,
            image_channels: 1,
            ..GeneratorConfig::default()
        }
    }

    fn images(n: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(&[1, 8, 8], |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn scores_shape_and_determinism() {
        let d: Discriminator<f64> = Discriminator::init(&tiny(), true, 1).unwrap();
        let xs = images(3, 2);
        let a = d.scores(&xs).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, d.scores(&xs).unwrap());
        assert!(d.scores(&[Tensor::zeros(&[1, 4, 4])]).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for mbstd in [false, true] {
            let d: Discriminator<f64> = Discriminator::init(&tiny(), mbstd, 7).unwrap();
            let xs = images(3, 4);
            let weights = [0.7, -1.3, 0.4];
            let trace = d.forward(&xs).unwrap();
            let g = d.input_gradients(&trace, &weights);
            let objective = |xs: &[Tensor<f64>]| -> f64 {
                d.scores(xs).unwrap().iter().zip(&weights).map(|(s, w)| s * w).sum()
            };
            for (i, j) in [(0, 5), (1, 17), (2, 63)] {
                let h = 1e-5;
                let mut plus = xs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = xs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = g[i].data()[j];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "mbstd={mbstd} fd {fd} an {an}");
            }
        }
    }
}
