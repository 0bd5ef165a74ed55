//! Pairwise image distances for the path-length metric.
//!
//! Every metric here is a quadratic form of the image difference, so
//! `d(x, x + hδ) = h²·d(x, x + δ)` holds up to rounding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::tensor::Tensor;

pub trait ImageDistance: Send + Sync {
    fn name(&self) -> String;
    /// True when `d(x, x + hδ)` scales exactly with `h²`.
    fn is_quadratic(&self) -> bool;
    fn distance(&self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64>;
}

fn difference(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    a.check_shape(b.shape())?;
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SquaredL2;

impl ImageDistance for SquaredL2 {
    fn name(&self) -> String {
        "squared_l2".into()
    }

    fn is_quadratic(&self) -> bool {
        true
    }

    fn distance(&self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
        Ok(difference(a, b)?.sum_sq())
    }
}

/// Interpolation weights of a half-pixel-centred bilinear resize along one
/// axis, as `(lower index, upper index, upper weight)` per output sample.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize of every channel to `size × size`.
pub fn resize_bilinear(x: &Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    if x.shape().len() != 3 || x.height() == 0 || x.width() == 0 || size == 0 {
        return Err(Error::ShapeMismatch(format!("cannot resize {:?} to {size}²", x.shape())));
    }
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let ty = bilinear_taps(h, size);
    let tx = bilinear_taps(w, size);
    let mut out = Tensor::zeros(&[c, size, size]);
    for ch in 0..c {
        let src = x.channel(ch);
        let mut rows = vec![0.0; size * w];
        for (oy, &(lo, hi, f)) in ty.iter().enumerate() {
            for ix in 0..w {
                rows[oy * w + ix] = (1.0 - f) * src[lo * w + ix] + f * src[hi * w + ix];
            }
        }
        let dst = out.channel_mut(ch);
        for oy in 0..size {
            for (ox, &(lo, hi, f)) in tx.iter().enumerate() {
                dst[oy * size + ox] = (1.0 - f) * rows[oy * w + lo] + f * rows[oy * w + hi];
            }
        }
    }
    Ok(out)
}

/// Desk-scale stand-in for a learned perceptual metric: squared L2 between
/// bilinearly downsampled images after a fixed per-channel standardization.
///
/// The standardization constants are fixed rather than estimated from the
/// images, which keeps the metric an exact quadratic form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyDistance {
    pub size: usize,
    /// Per-channel standard deviation used for standardization; a single
    /// entry applies to all channels.
    pub channel_std: Vec<f64>,
}

impl Default for ProxyDistance {
    fn default() -> Self {
        Self {
            size: 16,
            channel_std: vec![0.5],
        }
    }
}

impl ProxyDistance {
    fn std_for(&self, channel: usize) -> Result<f64> {
        let s = match self.channel_std.as_slice() {
            [s] => *s,
            all => *all.get(channel).ok_or(Error::OutOfRange {
                index: channel,
                len: all.len(),
            })?,
        };
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("channel std must be positive, got {s}")));
        }
        Ok(s)
    }
}

impl ImageDistance for ProxyDistance {
    fn name(&self) -> String {
        "proxy".into()
    }

    fn is_quadratic(&self) -> bool {
        true
    }

    fn distance(&self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
        let small = resize_bilinear(&difference(a, b)?, self.size)?;
        let mut total = 0.0;
        for c in 0..small.channels() {
            let s = self.std_for(c)?;
            total += small.channel(c).iter().map(|v| (v / s) * (v / s)).sum::<f64>();
        }
        Ok(total)
    }
}

/// One linear feature layer of an externally supplied metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLayer {
    pub weight: f64,
    /// Row-major `[features, C·H·W]` projection.
    pub matrix: Vec<Vec<f64>>,
}

/// Weighted feature-space L2 with externally fitted linear features:
/// `d(a, b) = Σ_l weight_l · ‖A_l (a − b)‖²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalDistance {
    pub input_shape: [usize; 3],
    pub layers: Vec<FeatureLayer>,
    #[serde(skip)]
    source: String,
}

impl ExternalDistance {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut metric: Self = serde_json::from_str(&text)?;
        let n: usize = metric.input_shape.iter().product();
        for (i, layer) in metric.layers.iter().enumerate() {
            if !(layer.weight >= 0.0) {
                return Err(Error::Config(format!("layer {i}: weight must be non-negative")));
            }
            if let Some(row) = layer.matrix.iter().find(|r| r.len() != n) {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: row.len(),
                });
            }
        }
        metric.source = path.display().to_string();
        Ok(metric)
    }
}

impl ImageDistance for ExternalDistance {
    fn name(&self) -> String {
        format!("external:{}", self.source)
    }

    fn is_quadratic(&self) -> bool {
        true
    }

    fn distance(&self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
        a.check_shape(&self.input_shape)?;
        let diff = difference(a, b)?;
        let mut total = 0.0;
        for layer in &self.layers {
            let energy: f64 = layer
                .matrix
                .iter()
                .map(|row| {
                    let f: f64 = row.iter().zip(diff.data()).map(|(w, d)| w * d).sum();
                    f * f
                })
                .sum();
            total += layer.weight * energy;
        }
        Ok(total)
    }
}

/// Central `fraction × fraction` region of a `[C, H, W]` image.
pub fn crop_center(image: &Tensor<f64>, fraction: f64) -> Result<Tensor<f64>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("crop fraction must lie in (0, 1], got {fraction}")));
    }
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let ch = (h as f64 * fraction).round() as usize;
    let cw = (w as f64 * fraction).round() as usize;
    if ch == 0 || cw == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop fraction {fraction} leaves nothing of a {h}×{w} image"
        )));
    }
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    Ok(Tensor::from_fn(&[c, ch, cw], |i| {
        let (k, rest) = (i / (ch * cw), i % (ch * cw));
        image.at(k, y0 + rest / cw, x0 + rest % cw)
    }))
}

pub const DEFAULT_CROP_FRACTION: f64 = 0.75;

/// Applies a center crop to both images before delegating.
pub struct Cropped<D> {
    pub inner: D,
    pub fraction: f64,
}

impl<D: ImageDistance> ImageDistance for Cropped<D> {
    fn name(&self) -> String {
        format!("{}+crop{}", self.inner.name(), self.fraction)
    }

    fn is_quadratic(&self) -> bool {
        self.inner.is_quadratic()
    }

    fn distance(&self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
        self.inner
            .distance(&crop_center(a, self.fraction)?, &crop_center(b, self.fraction)?)
    }
}

impl ImageDistance for Box<dyn ImageDistance> {
    fn name(&self) -> String {
        self.as_ref().name()
    }

    fn is_quadratic(&self) -> bool {
        self.as_ref().is_quadratic()
    }

    fn distance(&self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
        self.as_ref().distance(a, b)
    }
}

/// Resolves `proxy`, `squared_l2` or `external:<path>`, optionally wrapped
/// in a center crop.
pub fn distance_by_name(name: &str, crop: Option<f64>) -> Result<Box<dyn ImageDistance>> {
    let base: Box<dyn ImageDistance> = match name {
        "proxy" => Box::new(ProxyDistance::default()),
        "squared_l2" => Box::new(SquaredL2),
        other => match other.strip_prefix("external:") {
            Some(path) if !path.is_empty() => Box::new(ExternalDistance::load(Path::new(path))?),
            _ => return Err(Error::UnknownName(format!("distance metric `{other}`"))),
        },
    };
    Ok(match crop {
        Some(fraction) => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::InvalidArgument(format!("crop fraction must lie in (0, 1], got {fraction}")));
            }
            Box::new(Cropped { inner: base, fraction })
        }
        None => base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| (i as f64 * 0.37).sin())
    }

    #[test]
    fn crop_examples() {
        let x = ramp(&[3, 32, 32]);
        assert_eq!(crop_center(&x, 1.0).unwrap(), x);
        let c = crop_center(&x, 0.5).unwrap();
        assert_eq!(c.shape(), &[3, 16, 16]);
        assert_eq!(c.at(1, 0, 0), x.at(1, 8, 8));
        assert_eq!(c.at(2, 15, 15), x.at(2, 23, 23));
        let k = Tensor::full(&[1, 8, 8], 0.25);
        assert!(crop_center(&k, 0.5).unwrap().data().iter().all(|&v| v == 0.25));
        assert!(crop_center(&x, 0.0).is_err());
        assert!(crop_center(&x, 0.01).is_err());
    }

    #[test]
    fn bilinear_halving_averages_pairs() {
        let x = ramp(&[1, 4, 4]);
        let y = resize_bilinear(&x, 2).unwrap();
        let expect = (x.at(0, 0, 0) + x.at(0, 0, 1) + x.at(0, 1, 0) + x.at(0, 1, 1)) / 4.0;
        assert!((y.at(0, 0, 0) - expect).abs() < 1e-15);
        assert_eq!(resize_bilinear(&x, 4).unwrap(), x);
    }

    #[test]
    fn proxy_examples() {
        let d = ProxyDistance::default();
        let x = ramp(&[3, 32, 32]);
        let delta = Tensor::from_fn(&[3, 32, 32], |i| ((i * 7919) % 13) as f64 - 6.0);
        assert_eq!(d.distance(&x, &x).unwrap(), 0.0);
        let shifted = |h: f64| Tensor::from_vec(x.shape(), x.data().iter().zip(delta.data()).map(|(a, b)| a + h * b).collect()).unwrap();
        let base = d.distance(&x, &shifted(1.0)).unwrap();
        for h in [1e-2, 1e-3, 1e-4] {
            let r = d.distance(&x, &shifted(h)).unwrap() / (h * h);
            assert!((r / base - 1.0).abs() < 1e-6, "h={h}: {r} vs {base}");
        }
        let y = shifted(0.3);
        assert_eq!(d.distance(&x, &y).unwrap(), d.distance(&y, &x).unwrap());
        assert!(d.distance(&x, &ramp(&[3, 16, 16])).is_err());
    }

    #[test]
    fn names_resolve() {
        assert_eq!(distance_by_name("proxy", None).unwrap().name(), "proxy");
        assert_eq!(distance_by_name("squared_l2", Some(0.75)).unwrap().name(), "squared_l2+crop0.75");
        assert!(matches!(distance_by_name("vgg", None), Err(Error::UnknownName(_))));
        assert!(distance_by_name("external:", None).is_err());
        assert!(distance_by_name("proxy", Some(1.5)).is_err());
    }

    #[test]
    fn external_adapter_loads_weighted_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metric.json");
        std::fs::write(
            &path,
            r#"{"input_shape":[1,1,2],"layers":[{"weight":2.0,"matrix":[[1.0,0.0],[0.0,3.0]]}]}"#,
        )
        .unwrap();
        let d = distance_by_name(&format!("external:{}", path.display()), None).unwrap();
        let a = Tensor::from_vec(&[1, 1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(d.distance(&a, &b).unwrap(), 2.0 * (1.0 + 9.0));
        std::fs::write(&path, r#"{"input_shape":[1,1,2],"layers":[{"weight":1.0,"matrix":[[1.0]]}]}"#).unwrap();
        assert!(ExternalDistance::load(&path).is_err());
    }
}
