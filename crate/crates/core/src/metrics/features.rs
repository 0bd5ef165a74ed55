use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d};
use crate::perceptual::resize_bilinear;
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 64;
const EXTRACTOR_SEED: u64 = 0x0f1d_5eed;
const INPUT_SIZE: usize = 16;
const HIDDEN: usize = 16;

/// Fixed random two-layer conv net; per-channel spatial mean and standard
/// deviation of its last layer form the embedding.
struct RandomConv {
    conv1: Conv2d<f64>,
    conv2: Conv2d<f64>,
}

impl RandomConv {
    fn new(image_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        Self {
            conv1: Conv2d::init(image_channels, HIDDEN, 3, 2f64.sqrt(), &mut rng),
            conv2: Conv2d::init(HIDDEN, FEATURE_DIM / 2, 3, 2f64.sqrt(), &mut rng),
        }
    }

    fn embed(&self, image: &Tensor<f64>) -> Result<Vec<f64>> {
        let x = resize_bilinear(image, INPUT_SIZE)?;
        let h = avg_pool2(&self.conv1.forward(&x)?.map(leaky_relu));
        let h = avg_pool2(&self.conv2.forward(&h)?.map(leaky_relu));
        let n = h.plane() as f64;
        let mut out = Vec::with_capacity(FEATURE_DIM);
        for c in 0..h.channels() {
            let ch = h.channel(c);
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out.push(mean);
            out.push(var.sqrt());
        }
        Ok(out)
    }
}

fn avg_pool2(x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (x.channels(), x.height() / 2, x.width() / 2);
    Tensor::from_fn(&[c, h, w], |i| {
        let (k, rest) = (i / (h * w), i % (h * w));
        let (y, xx) = (2 * (rest / w), 2 * (rest % w));
        (x.at(k, y, xx) + x.at(k, y, xx + 1) + x.at(k, y + 1, xx) + x.at(k, y + 1, xx + 1)) / 4.0
    })
}

/// Embeds each image independently. `random-conv` is the only built-in
/// extractor.
pub fn extract_features(images: &[Tensor<f64>], extractor: &str) -> Result<Vec<Vec<f64>>> {
    if extractor != "random-conv" {
        return Err(Error::UnknownName(format!("feature extractor `{extractor}`")));
    }
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to embed".into()))?;
    let net = RandomConv::new(first.channels());
    images.iter().map(|img| net.embed(img)).collect()
}
