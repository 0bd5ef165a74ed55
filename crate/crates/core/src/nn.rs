//! Layer primitives with hand-written backward passes.
//!
//! Every trainable weight is stored `N(0, 1)`-distributed and multiplied by a
//! runtime constant (`scale`) at evaluation time (equalized learning rate).
//! Per-layer learning-rate multipliers are carried alongside the tensors and
//! applied by the optimizer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Flat view over the trainable tensors of a network.
pub trait Parameters<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>);

    fn param_refs(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.param_refs().iter().map(|p| p.tensor.len()).sum()
    }
}

pub struct ParamRef<'a, T> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
    pub lr_mul: f64,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn normal_tensor<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
}

#[inline]
pub fn leaky_relu<T: Real>(v: T) -> T {
    if v.re() >= 0.0 {
        v
    } else {
        v * T::from_f64(LEAKY_SLOPE)
    }
}

#[inline]
pub fn leaky_relu_grad<T: Real>(pre: T, g: T) -> T {
    if pre.re() >= 0.0 {
        g
    } else {
        g * T::from_f64(LEAKY_SLOPE)
    }
}

/// Equalized-learning-rate runtime multiplier `gain / sqrt(fan_in)`.
pub fn he_scale(fan_in: usize, gain: f64) -> f64 {
    gain / (fan_in as f64).sqrt()
}

/// Fully-connected layer `y = scale · W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub scale: f64,
    pub lr_mul: f64,
}

impl<T: Real> Dense<T> {
    pub fn init<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: normal_tensor(&[outputs, inputs], rng),
            bias: Tensor::zeros(&[outputs]),
            scale: he_scale(inputs, gain),
            lr_mul: 1.0,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            scale: self.scale,
            lr_mul: self.lr_mul,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            scale: self.scale,
            lr_mul: self.lr_mul,
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let n_in = self.inputs();
        if x.len() != n_in {
            return Err(Error::DimensionMismatch {
                expected: n_in,
                actual: x.len(),
            });
        }
        let scale = T::from_f64(self.scale);
        let w = self.weight.data();
        Ok(self
            .bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, &b)| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = T::zero();
                for (&wi, &xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
                acc * scale + b
            })
            .collect())
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the gradient with respect to the input.
    pub fn backward(&self, x: &[T], gy: &[T], grads: Option<&mut Dense<T>>) -> Vec<T> {
        let n_in = self.inputs();
        let scale = T::from_f64(self.scale);
        let w = self.weight.data();
        let mut gx = vec![T::zero(); n_in];
        for (o, &g) in gy.iter().enumerate() {
            let gs = g * scale;
            for (acc, &wi) in gx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *acc += wi * gs;
            }
        }
        if let Some(grads) = grads {
            let gw = grads.weight.data_mut();
            for (o, &g) in gy.iter().enumerate() {
                let gs = g * scale;
                for (acc, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                    *acc += gs * xi;
                }
            }
            for (acc, &g) in grads.bias.data_mut().iter_mut().zip(gy) {
                *acc += g;
            }
        }
        gx
    }
}

impl<T: Real> Parameters<T> for Dense<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            tensor: &self.weight,
            lr_mul: self.lr_mul,
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            tensor: &self.bias,
            lr_mul: self.lr_mul,
        });
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Stride-1 "same" convolution with odd square kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub scale: f64,
}

impl<T: Real> Conv2d<T> {
    pub fn init<R: Rng>(inputs: usize, outputs: usize, kernel: usize, gain: f64, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            weight: normal_tensor(&[outputs, inputs, kernel, kernel], rng),
            bias: Tensor::zeros(&[outputs]),
            scale: he_scale(inputs * kernel * kernel, gain),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            scale: self.scale,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            scale: self.scale,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 3 || x.channels() != self.inputs() {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got shape {:?}",
                self.inputs(),
                x.shape()
            )));
        }
        let (cin, cout, k) = (self.inputs(), self.outputs(), self.kernel());
        let (h, w) = (x.height(), x.width());
        let scale = T::from_f64(self.scale);
        let weight = self.weight.data();
        let mut out = Tensor::zeros(&[cout, h, w]);
        for oc in 0..cout {
            let o = out.channel_mut(oc);
            for ic in 0..cin {
                let xc = x.channel(ic);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((oc * cin + ic) * k + ky) * k + kx] * scale;
                        for_each_tap(h, w, k, ky, kx, |orange, irange| {
                            for (a, &b) in o[orange].iter_mut().zip(&xc[irange]) {
                                *a += wv * b;
                            }
                        });
                    }
                }
            }
            let b = self.bias.data()[oc];
            o.iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }

    /// Returns the input gradient when `need_input_grad` is set, and
    /// accumulates parameter gradients into `grads` when given.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        grads: Option<&mut Conv2d<T>>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (cin, cout, k) = (self.inputs(), self.outputs(), self.kernel());
        let (h, w) = (x.height(), x.width());
        let scale = T::from_f64(self.scale);
        let weight = self.weight.data();
        let gx = if need_input_grad {
            let mut gx = Tensor::zeros(&[cin, h, w]);
            for oc in 0..cout {
                let g = gy.channel(oc);
                for ic in 0..cin {
                    let gxc = gx.channel_mut(ic);
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weight[((oc * cin + ic) * k + ky) * k + kx] * scale;
                            for_each_tap(h, w, k, ky, kx, |orange, irange| {
                                for (a, &b) in gxc[irange].iter_mut().zip(&g[orange]) {
                                    *a += wv * b;
                                }
                            });
                        }
                    }
                }
            }
            Some(gx)
        } else {
            None
        };
        if let Some(grads) = grads {
            let gw = grads.weight.data_mut();
            for oc in 0..cout {
                let g = gy.channel(oc);
                for ic in 0..cin {
                    let xc = x.channel(ic);
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for_each_tap(h, w, k, ky, kx, |orange, irange| {
                                for (&a, &b) in g[orange].iter().zip(&xc[irange]) {
                                    acc += a * b;
                                }
                            });
                            gw[((oc * cin + ic) * k + ky) * k + kx] += acc * scale;
                        }
                    }
                }
                let mut acc = T::zero();
                for &v in g {
                    acc += v;
                }
                grads.bias.data_mut()[oc] += acc;
            }
        }
        gx
    }
}

/// Calls `f(output_range, input_range)` for each row that kernel tap
/// `(ky, kx)` touches, with zero padding outside the image.
#[inline]
fn for_each_tap(
    h: usize,
    w: usize,
    k: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(std::ops::Range<usize>, std::ops::Range<usize>),
) {
    let pad = (k / 2) as isize;
    let dy = ky as isize - pad;
    let dx = kx as isize - pad;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let iy = (y as isize + dy) as usize;
        let ix0 = (x0 as isize + dx) as usize;
        f(
            y * w + x0..y * w + x1,
            iy * w + ix0..iy * w + ix0 + (x1 - x0),
        );
    }
}

impl<T: Real> Parameters<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            tensor: &self.weight,
            lr_mul: 1.0,
        });
        out.push(ParamRef {
            name: join(prefix, "bias"),
            tensor: &self.bias,
            lr_mul: 1.0,
        });
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Per-channel scale/bias pair for one AdaIN site.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector<T> {
    pub scale: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> StyleVector<T> {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Splits an affine output of length `2C` into `(y_s, y_b)`.
    pub fn from_affine(y: Vec<T>) -> Self {
        let c = y.len() / 2;
        let mut scale = y;
        let bias = scale.split_off(c);
        Self { scale, bias }
    }
}

pub const ADAIN_EPS: f64 = 1e-8;

/// Adaptive instance normalization: each channel is normalized with its own
/// spatial mean and population standard deviation, then scaled by `y_s` and
/// shifted by `y_b`.
pub fn adain<T: Real>(x: &Tensor<T>, style: &StyleVector<T>) -> Result<Tensor<T>> {
    if x.channels() != style.channels() || style.bias.len() != style.channels() {
        return Err(Error::DimensionMismatch {
            expected: x.channels(),
            actual: style.channels(),
        });
    }
    let mut out = x.clone();
    for c in 0..x.channels() {
        let (mean, sd) = channel_stats(x.channel(c));
        let k = style.scale[c] / (sd + T::from_f64(ADAIN_EPS));
        let b = style.bias[c];
        for v in out.channel_mut(c) {
            *v = (*v - mean) * k + b;
        }
    }
    Ok(out)
}

/// Population mean and standard deviation of one channel.
pub(crate) fn channel_stats<T: Real>(xs: &[T]) -> (T, T) {
    let n = T::from_f64(xs.len() as f64);
    let mut sum = T::zero();
    for &v in xs {
        sum += v;
    }
    let mean = sum / n;
    let mut ss = T::zero();
    for &v in xs {
        let d = v - mean;
        ss += d * d;
    }
    (mean, (ss / n).sqrt())
}

/// Backward pass of [`adain`]. Returns `(dx, dy_s, dy_b)`.
pub fn adain_backward<T: Real>(
    x: &Tensor<T>,
    style: &StyleVector<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, StyleVector<T>) {
    let channels = x.channels();
    let n = x.plane();
    let nf = T::from_f64(n as f64);
    let mut gx = Tensor::zeros(x.shape());
    let mut gstyle = StyleVector {
        scale: vec![T::zero(); channels],
        bias: vec![T::zero(); channels],
    };
    for c in 0..channels {
        let xc = x.channel(c);
        let g = gy.channel(c);
        let (mean, sd) = channel_stats(xc);
        let denom = sd + T::from_f64(ADAIN_EPS);
        let mut gs = T::zero();
        let mut gb = T::zero();
        let mut gn_sum = T::zero();
        let mut gn_dot = T::zero();
        for (&xv, &gv) in xc.iter().zip(g) {
            let centered = xv - mean;
            gs += gv * centered / denom;
            gb += gv;
            let gn = gv * style.scale[c];
            gn_sum += gn;
            gn_dot += gn * centered;
        }
        gstyle.scale[c] = gs;
        gstyle.bias[c] = gb;
        let gn_mean = gn_sum / nf;
        // Variance path vanishes for constant channels.
        let var_coeff = if sd.re() > 0.0 {
            gn_dot / (denom * denom * nf * sd)
        } else {
            T::zero()
        };
        let ys = style.scale[c];
        for ((out, &xv), &gv) in gx.channel_mut(c).iter_mut().zip(xc).zip(g) {
            *out = (gv * ys - gn_mean) / denom - var_coeff * (xv - mean);
        }
    }
    (gx, gstyle)
}

/// Adds a single-channel noise image to every channel with a per-channel
/// strength.
pub fn apply_noise<T: Real>(x: &Tensor<T>, noise: &Tensor<T>, strength: &[T]) -> Result<Tensor<T>> {
    if noise.len() != x.plane() {
        return Err(Error::ShapeMismatch(format!(
            "noise has {} pixels, feature map plane has {}",
            noise.len(),
            x.plane()
        )));
    }
    if strength.len() != x.channels() {
        return Err(Error::DimensionMismatch {
            expected: x.channels(),
            actual: strength.len(),
        });
    }
    let mut out = x.clone();
    for (c, &s) in strength.iter().enumerate() {
        for (v, &n) in out.channel_mut(c).iter_mut().zip(noise.data()) {
            *v += s * n;
        }
    }
    Ok(out)
}

/// Gradient of [`apply_noise`] with respect to the per-channel strengths.
pub fn apply_noise_strength_grad<T: Real>(gy: &Tensor<T>, noise: &Tensor<T>) -> Vec<T> {
    (0..gy.channels())
        .map(|c| {
            let mut acc = T::zero();
            for (&g, &n) in gy.channel(c).iter().zip(noise.data()) {
                acc += g * n;
            }
            acc
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleKind {
    /// Nearest-neighbour upsampling, 2×2 box downsampling.
    Nearest,
    /// Separable `[1, 2, 1]` binomial low-pass around zero insertion or
    /// decimation.
    Binomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

// 1-D resampling kernels along a contiguous line. Edges clamp.

fn line_forward<T: Real>(kind: ResampleKind, dir: Direction, src: &[T], dst: &mut [T]) {
    let n = src.len();
    let half = T::from_f64(0.5);
    let quarter = T::from_f64(0.25);
    match (kind, dir) {
        (ResampleKind::Binomial, Direction::Up) => {
            for i in 0..n {
                let next = src[(i + 1).min(n - 1)];
                dst[2 * i] = src[i];
                dst[2 * i + 1] = (src[i] + next) * half;
            }
        }
        (ResampleKind::Binomial, Direction::Down) => {
            for (i, out) in dst.iter_mut().enumerate() {
                let prev = src[(2 * i).saturating_sub(1)];
                *out = prev * quarter + src[2 * i] * half + src[2 * i + 1] * quarter;
            }
        }
        (ResampleKind::Nearest, Direction::Up) => {
            for i in 0..n {
                dst[2 * i] = src[i];
                dst[2 * i + 1] = src[i];
            }
        }
        (ResampleKind::Nearest, Direction::Down) => {
            for (i, out) in dst.iter_mut().enumerate() {
                *out = (src[2 * i] + src[2 * i + 1]) * half;
            }
        }
    }
}

/// Adjoint of [`line_forward`]: accumulates into `gsrc`.
fn line_adjoint<T: Real>(kind: ResampleKind, dir: Direction, gdst: &[T], gsrc: &mut [T]) {
    let n = gsrc.len();
    let half = T::from_f64(0.5);
    let quarter = T::from_f64(0.25);
    match (kind, dir) {
        (ResampleKind::Binomial, Direction::Up) => {
            for i in 0..n {
                gsrc[i] += gdst[2 * i] + gdst[2 * i + 1] * half;
                gsrc[(i + 1).min(n - 1)] += gdst[2 * i + 1] * half;
            }
        }
        (ResampleKind::Binomial, Direction::Down) => {
            for (i, &g) in gdst.iter().enumerate() {
                gsrc[(2 * i).saturating_sub(1)] += g * quarter;
                gsrc[2 * i] += g * half;
                gsrc[2 * i + 1] += g * quarter;
            }
        }
        (ResampleKind::Nearest, Direction::Up) => {
            for i in 0..n {
                gsrc[i] += gdst[2 * i] + gdst[2 * i + 1];
            }
        }
        (ResampleKind::Nearest, Direction::Down) => {
            for (i, &g) in gdst.iter().enumerate() {
                gsrc[2 * i] += g * half;
                gsrc[2 * i + 1] += g * half;
            }
        }
    }
}

fn resampled_size(dir: Direction, n: usize) -> usize {
    match dir {
        Direction::Up => n * 2,
        Direction::Down => n / 2,
    }
}

/// 2× separable resampling of a `[C, H, W]` feature map.
pub fn resample<T: Real>(x: &Tensor<T>, kind: ResampleKind, dir: Direction) -> Result<Tensor<T>> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    if dir == Direction::Down && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::InvalidArgument(format!(
            "downsampling needs even spatial size, got {h}x{w}"
        )));
    }
    let (oh, ow) = (resampled_size(dir, h), resampled_size(dir, w));
    // Rows first, then columns.
    let mut rows = vec![T::zero(); c * h * ow];
    for r in 0..c * h {
        line_forward(kind, dir, &x.data()[r * w..(r + 1) * w], &mut rows[r * ow..(r + 1) * ow]);
    }
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut col = vec![T::zero(); h];
    let mut ocol = vec![T::zero(); oh];
    for ch in 0..c {
        let plane = &rows[ch * h * ow..(ch + 1) * h * ow];
        let oplane = out.channel_mut(ch);
        for xi in 0..ow {
            for y in 0..h {
                col[y] = plane[y * ow + xi];
            }
            line_forward(kind, dir, &col, &mut ocol);
            for y in 0..oh {
                oplane[y * ow + xi] = ocol[y];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resample`]; `input_shape` is the shape of the forward input.
pub fn resample_backward<T: Real>(
    gy: &Tensor<T>,
    input_shape: &[usize],
    kind: ResampleKind,
    dir: Direction,
) -> Tensor<T> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (gy.height(), gy.width());
    let mut grows = vec![T::zero(); c * h * ow];
    let mut gcol = vec![T::zero(); oh];
    let mut col = vec![T::zero(); h];
    for ch in 0..c {
        let gplane = gy.channel(ch);
        let rplane = &mut grows[ch * h * ow..(ch + 1) * h * ow];
        for xi in 0..ow {
            for y in 0..oh {
                gcol[y] = gplane[y * ow + xi];
            }
            col.iter_mut().for_each(|v| *v = T::zero());
            line_adjoint(kind, dir, &gcol, &mut col);
            for y in 0..h {
                rplane[y * ow + xi] = col[y];
            }
        }
    }
    let mut gx = Tensor::zeros(input_shape);
    for r in 0..c * h {
        line_adjoint(
            kind,
            dir,
            &grows[r * ow..(r + 1) * ow],
            &mut gx.data_mut()[r * w..(r + 1) * w],
        );
    }
    gx
}
