//! The synthesis network `g`: a 4×4 starting tensor grown to the output
//! resolution by blocks of (upsample →) conv → noise → leaky ReLU → AdaIN.
//! Each conv (or the input layer) is one style site.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{GeneratorConfig, InputKind};
use crate::error::{Error, Result};
use crate::nn::{
    adain, adain_backward, apply_noise, apply_noise_strength_grad, join, leaky_relu, leaky_relu_grad,
    resample, resample_backward, Conv2d, Dense, Direction, ParamRef, Parameters, StyleVector,
};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum SynthesisInput<T> {
    Constant(Tensor<T>),
    Latent(Dense<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisLayer<T> {
    /// `None` for the first site, which reads the input tensor directly.
    pub conv: Option<Conv2d<T>>,
    pub upsample: bool,
    pub noise_strength: Tensor<T>,
    /// The learned affine map `w → (y_s, y_b)`; absent when styles are off.
    pub style: Option<Dense<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisNetwork<T> {
    pub config: GeneratorConfig,
    pub input: SynthesisInput<T>,
    pub layers: Vec<SynthesisLayer<T>>,
    pub to_rgb: Conv2d<T>,
}

/// One single-channel noise image per style site.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMaps<T> {
    pub maps: Vec<Tensor<T>>,
}

impl<T: Real> NoiseMaps<T> {
    pub fn zeros(config: &GeneratorConfig) -> Self {
        Self {
            maps: (0..config.style_slots())
                .map(|s| {
                    let r = config.site_resolution(s);
                    Tensor::zeros(&[1, r, r])
                })
                .collect(),
        }
    }

    pub fn sample<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Self {
        Self {
            maps: (0..config.style_slots())
                .map(|s| {
                    let r = config.site_resolution(s);
                    Tensor::from_fn(&[1, r, r], |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> NoiseMaps<U> {
        NoiseMaps {
            maps: self.maps.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Per-site intermediates of a forward pass.
#[derive(Clone, Debug)]
pub struct SiteTrace<T> {
    /// Conv input (after upsampling); empty for the first site.
    conv_input: Option<Tensor<T>>,
    /// Shape of the tensor before upsampling.
    pre_upsample_shape: Vec<usize>,
    pre_activation: Tensor<T>,
    post_activation: Tensor<T>,
    style: Option<StyleVector<T>>,
    /// Site output (after AdaIN).
    pub output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct SynthesisTrace<T> {
    pub sites: Vec<SiteTrace<T>>,
    pub image: Tensor<T>,
}

impl<T: Real> SynthesisTrace<T> {
    /// Activation emitted by style site `site`.
    pub fn activation(&self, site: usize) -> &Tensor<T> {
        &self.sites[site].output
    }
}

/// Gradients returned by [`SynthesisNetwork::backward`].
pub struct SynthesisGrads<T> {
    /// `∂loss/∂w` for every style slot.
    pub styles: Vec<Vec<T>>,
}

impl<T: Real> SynthesisNetwork<T> {
    pub fn init<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c0 = config.channels_at_level(0);
        let input = match config.input {
            InputKind::Constant => SynthesisInput::Constant(Tensor::full(&[c0, 4, 4], T::one())),
            InputKind::Latent => {
                SynthesisInput::Latent(Dense::init(config.w_dim, c0 * 16, 2f64.sqrt(), rng))
            }
        };
        let mut layers = Vec::with_capacity(config.style_slots());
        for site in 0..config.style_slots() {
            let channels = config.site_channels(site);
            let conv = if site == 0 {
                None
            } else {
                let inputs = config.site_channels(site - 1);
                Some(Conv2d::init(inputs, channels, 3, 2f64.sqrt(), rng))
            };
            let style = config.styles.then(|| {
                let mut affine = Dense::init(config.w_dim, 2 * channels, 1.0, rng);
                for b in &mut affine.bias.data_mut()[..channels] {
                    *b = T::one();
                }
                affine
            });
            layers.push(SynthesisLayer {
                conv,
                upsample: site > 0 && site % 2 == 0,
                noise_strength: Tensor::zeros(&[channels]),
                style,
            });
        }
        let last = config.site_channels(config.style_slots() - 1);
        let to_rgb = Conv2d::init(last, config.image_channels, 1, 1.0, rng);
        Ok(Self {
            config: config.clone(),
            input,
            layers,
            to_rgb,
        })
    }

    pub fn style_slots(&self) -> usize {
        self.layers.len()
    }

    pub fn cast<U: Real>(&self) -> SynthesisNetwork<U> {
        SynthesisNetwork {
            config: self.config.clone(),
            input: match &self.input {
                SynthesisInput::Constant(t) => SynthesisInput::Constant(t.cast()),
                SynthesisInput::Latent(d) => SynthesisInput::Latent(d.cast()),
            },
            layers: self
                .layers
                .iter()
                .map(|l| SynthesisLayer {
                    conv: l.conv.as_ref().map(Conv2d::cast),
                    upsample: l.upsample,
                    noise_strength: l.noise_strength.cast(),
                    style: l.style.as_ref().map(Dense::cast),
                })
                .collect(),
            to_rgb: self.to_rgb.cast(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            input: match &self.input {
                SynthesisInput::Constant(t) => SynthesisInput::Constant(t.zeros_like()),
                SynthesisInput::Latent(d) => SynthesisInput::Latent(d.zeros_like()),
            },
            layers: self
                .layers
                .iter()
                .map(|l| SynthesisLayer {
                    conv: l.conv.as_ref().map(Conv2d::zeros_like),
                    upsample: l.upsample,
                    noise_strength: l.noise_strength.zeros_like(),
                    style: l.style.as_ref().map(Dense::zeros_like),
                })
                .collect(),
            to_rgb: self.to_rgb.zeros_like(),
        }
    }

    /// The style `(y_s, y_b)` that site `site` derives from `w`.
    pub fn affine_style(&self, w: &[T], site: usize) -> Result<StyleVector<T>> {
        let layer = self.layers.get(site).ok_or(Error::OutOfRange {
            index: site,
            len: self.layers.len(),
        })?;
        let affine = layer
            .style
            .as_ref()
            .ok_or_else(|| Error::Config("styles are disabled in this configuration".into()))?;
        Ok(StyleVector::from_affine(affine.forward(w)?))
    }

    fn check_inputs(&self, styles: &[Vec<T>], noise: &NoiseMaps<T>) -> Result<()> {
        if styles.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                actual: styles.len(),
            });
        }
        if let Some(bad) = styles.iter().find(|w| w.len() != self.config.w_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.config.w_dim,
                actual: bad.len(),
            });
        }
        if noise.maps.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} noise maps for {} sites",
                noise.maps.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Runs the network on per-slot `w` vectors. Noise maps are ignored when
    /// noise is disabled in the config.
    pub fn forward(&self, styles: &[Vec<T>], noise: &NoiseMaps<T>) -> Result<SynthesisTrace<T>> {
        self.check_inputs(styles, noise)?;
        let mut sites = Vec::with_capacity(self.layers.len());
        let mut x: Option<Tensor<T>> = None;
        for (site, layer) in self.layers.iter().enumerate() {
            let (conv_input, pre_upsample_shape, conv_out) = match (&layer.conv, x.take()) {
                (Some(conv), Some(prev)) => {
                    let shape = prev.shape().to_vec();
                    let u = if layer.upsample {
                        resample(&prev, self.config.resample, Direction::Up)?
                    } else {
                        prev
                    };
                    let c = conv.forward(&u)?;
                    (Some(u), shape, c)
                }
                (None, None) => {
                    let start = match &self.input {
                        SynthesisInput::Constant(t) => t.clone(),
                        SynthesisInput::Latent(dense) => {
                            let c0 = self.config.channels_at_level(0);
                            Tensor::from_vec(&[c0, 4, 4], dense.forward(&styles[0])?)?
                        }
                    };
                    (None, Vec::new(), start)
                }
                _ => return Err(Error::Config("inconsistent synthesis layer layout".into())),
            };
            let pre_activation = if self.config.noise {
                apply_noise(&conv_out, &noise.maps[site], layer.noise_strength.data())?
            } else {
                conv_out
            };
            let post_activation = pre_activation.map(leaky_relu);
            let (style, output) = match &layer.style {
                Some(_) if self.config.styles => {
                    let style = self.affine_style(&styles[site], site)?;
                    let out = adain(&post_activation, &style)?;
                    (Some(style), out)
                }
                _ => (None, post_activation.clone()),
            };
            x = Some(output.clone());
            sites.push(SiteTrace {
                conv_input,
                pre_upsample_shape,
                pre_activation,
                post_activation,
                style,
                output,
            });
        }
        let last = x.expect("at least one site");
        let image = self.to_rgb.forward(&last)?;
        Ok(SynthesisTrace { sites, image })
    }

    /// Backpropagates `g_image`, accumulating parameter gradients into
    /// `grads` and returning `∂loss/∂w` per style slot.
    pub fn backward(
        &self,
        styles: &[Vec<T>],
        noise: &NoiseMaps<T>,
        trace: &SynthesisTrace<T>,
        g_image: &Tensor<T>,
        grads: &mut SynthesisNetwork<T>,
    ) -> SynthesisGrads<T> {
        let w_dim = self.config.w_dim;
        let mut g_styles = vec![vec![T::zero(); w_dim]; self.layers.len()];
        let last = &trace.sites.last().expect("at least one site").output;
        let mut g = self
            .to_rgb
            .backward(last, g_image, Some(&mut grads.to_rgb), true)
            .expect("input gradient requested");
        for site in (0..self.layers.len()).rev() {
            let layer = &self.layers[site];
            let glayer = &mut grads.layers[site];
            let st = &trace.sites[site];
            let g_post = match (&layer.style, &st.style) {
                (Some(affine), Some(style)) => {
                    let (g_h, g_style) = adain_backward(&st.post_activation, style, &g);
                    let mut gy = g_style.scale;
                    gy.extend(g_style.bias);
                    let gw = affine.backward(&styles[site], &gy, glayer.style.as_mut());
                    for (acc, v) in g_styles[site].iter_mut().zip(gw) {
                        *acc += v;
                    }
                    g_h
                }
                _ => g,
            };
            let mut g_pre = g_post;
            for (gv, &a) in g_pre.data_mut().iter_mut().zip(st.pre_activation.data()) {
                *gv = leaky_relu_grad(a, *gv);
            }
            if self.config.noise {
                let gs = apply_noise_strength_grad(&g_pre, &noise.maps[site]);
                for (acc, v) in glayer.noise_strength.data_mut().iter_mut().zip(gs) {
                    *acc += v;
                }
            }
            match (&layer.conv, &st.conv_input) {
                (Some(conv), Some(u)) => {
                    let g_u = conv
                        .backward(u, &g_pre, glayer.conv.as_mut(), true)
                        .expect("input gradient requested");
                    g = if layer.upsample {
                        resample_backward(&g_u, &st.pre_upsample_shape, self.config.resample, Direction::Up)
                    } else {
                        g_u
                    };
                }
                _ => {
                    match (&self.input, &mut grads.input) {
                        (SynthesisInput::Constant(_), SynthesisInput::Constant(gc)) => gc.add_assign(&g_pre),
                        (SynthesisInput::Latent(dense), SynthesisInput::Latent(gd)) => {
                            let gw = dense.backward(&styles[0], g_pre.data(), Some(gd));
                            for (acc, v) in g_styles[0].iter_mut().zip(gw) {
                                *acc += v;
                            }
                        }
                        _ => unreachable!("gradient container mirrors the network"),
                    }
                    g = Tensor::zeros(&[0]);
                }
            }
        }
        SynthesisGrads { styles: g_styles }
    }
}

impl<T: Real> Parameters<T> for SynthesisNetwork<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        match &self.input {
            SynthesisInput::Constant(t) => out.push(ParamRef {
                name: join(prefix, "const"),
                tensor: t,
                lr_mul: 1.0,
            }),
            SynthesisInput::Latent(d) => d.visit(&join(prefix, "input"), out),
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("site{i}"));
            if let Some(conv) = &layer.conv {
                conv.visit(&join(&p, "conv"), out);
            }
            out.push(ParamRef {
                name: join(&p, "noise_strength"),
                tensor: &layer.noise_strength,
                lr_mul: 1.0,
            });
            if let Some(style) = &layer.style {
                style.visit(&join(&p, "affine"), out);
            }
        }
        self.to_rgb.visit(&join(prefix, "to_rgb"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        match &mut self.input {
            SynthesisInput::Constant(t) => out.push(t),
            SynthesisInput::Latent(d) => d.visit_mut(out),
        }
        for layer in &mut self.layers {
            if let Some(conv) = &mut layer.conv {
                conv.visit_mut(out);
            }
            out.push(&mut layer.noise_strength);
            if let Some(style) = &mut layer.style {
                style.visit_mut(out);
            }
        }
        self.to_rgb.visit_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 8,
            z_dim: 6,
            w_dim: 6,
            mapping_depth: 2,
            base_channels: 8,
            min_channels: 4,
            ..GeneratorConfig::default()
        }
    }

    fn net(cfg: &GeneratorConfig) -> SynthesisNetwork<f64> {
        SynthesisNetwork::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn styles(cfg: &GeneratorConfig, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..cfg.w_dim).map(|_| rng.sample(StandardNormal)).collect();
        vec![w; cfg.style_slots()]
    }

    #[test]
    fn initialization_values() {
        let cfg = small_config();
        let n = net(&cfg);
        match &n.input {
            SynthesisInput::Constant(t) => assert!(t.data().iter().all(|&v| v == 1.0)),
            _ => panic!("expected constant input"),
        }
        for layer in &n.layers {
            assert!(layer.noise_strength.data().iter().all(|&v| v == 0.0));
            let affine = layer.style.as_ref().unwrap();
            let c = affine.outputs() / 2;
            assert!(affine.bias.data()[..c].iter().all(|&v| v == 1.0));
            assert!(affine.bias.data()[c..].iter().all(|&v| v == 0.0));
            if let Some(conv) = &layer.conv {
                assert!(conv.bias.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn affine_style_examples() {
        let cfg = small_config();
        let mut n = net(&cfg);
        let w = vec![0.3; cfg.w_dim];
        // Zero weights: y_s = 1, y_b = 0.
        n.layers[1].style.as_mut().unwrap().weight.fill(0.0);
        let s = n.affine_style(&w, 1).unwrap();
        assert!(s.scale.iter().all(|&v| v == 1.0) && s.bias.iter().all(|&v| v == 0.0));
        // Zero input gives the biases.
        let s = n.affine_style(&vec![0.0; cfg.w_dim], 2).unwrap();
        let affine = n.layers[2].style.as_ref().unwrap();
        let c = s.channels();
        assert_eq!(s.scale, affine.bias.data()[..c]);
        assert_eq!(s.bias, affine.bias.data()[c..]);
        // Rows set to e_k with w = 2 e_k: y_s = 1 + 2.
        let k = 1;
        let affine = n.layers[3].style.as_mut().unwrap();
        let inv = 1.0 / affine.scale;
        let cols = cfg.w_dim;
        affine.weight = Tensor::from_fn(affine.weight.shape(), |i| if i % cols == k { inv } else { 0.0 });
        let mut w = vec![0.0; cfg.w_dim];
        w[k] = 2.0;
        let s = n.affine_style(&w, 3).unwrap();
        assert!(s.scale.iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(n.affine_style(&w, 99).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let cfg = small_config();
        let n = net(&cfg);
        let s = styles(&cfg, 1);
        let noise = NoiseMaps::sample(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let a = n.forward(&s, &noise).unwrap();
        let b = n.forward(&s, &noise).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.image.shape(), &[3, 8, 8]);
        assert_eq!(a.activation(3).shape(), &[4, 8, 8]);
    }

    #[test]
    fn disabled_noise_equals_zero_strength() {
        let cfg = small_config();
        let n = net(&cfg);
        let mut cfg_off = cfg.clone();
        cfg_off.noise = false;
        let mut n_off = n.clone();
        n_off.config = cfg_off;
        let s = styles(&cfg, 4);
        let noise = NoiseMaps::sample(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(n.forward(&s, &noise).unwrap().image, n_off.forward(&s, &noise).unwrap().image);
    }

    #[test]
    fn rejects_wrong_slot_count() {
        let cfg = small_config();
        let n = net(&cfg);
        let s = styles(&cfg, 1);
        assert!(n.forward(&s[..2], &NoiseMaps::zeros(&cfg)).is_err());
    }

    #[test]
    fn traditional_input_reads_first_slot() {
        let mut cfg = small_config();
        cfg.input = InputKind::Latent;
        cfg.styles = false;
        cfg.noise = false;
        let n = net(&cfg);
        let noise = NoiseMaps::zeros(&cfg);
        let a = n.forward(&styles(&cfg, 1), &noise).unwrap().image;
        let b = n.forward(&styles(&cfg, 2), &noise).unwrap().image;
        assert_ne!(a, b);
    }
}
