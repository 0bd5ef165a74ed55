//! PNG export of `[C, H, W]` tensors in `[-1, 1]`.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, IoContext, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `round((v + 1)·127.5)`, clamped to `0..=255`.
pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn pixel<T: Real>(img: &Tensor<T>, y: usize, x: usize) -> Rgb<u8> {
    match img.channels() {
        1 => {
            let v = to_u8(img.at(0, y, x).re());
            Rgb([v, v, v])
        }
        _ => Rgb([
            to_u8(img.at(0, y, x).re()),
            to_u8(img.at(1, y, x).re()),
            to_u8(img.at(2, y, x).re()),
        ]),
    }
}

fn check<T: Real>(img: &Tensor<T>) -> Result<()> {
    if img.shape().len() != 3 || !matches!(img.channels(), 1 | 3) {
        return Err(Error::ShapeMismatch(format!(
            "expected a [1|3, H, W] image, got {:?}",
            img.shape()
        )));
    }
    Ok(())
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    img.save(path)?;
    Ok(())
}

pub fn save_png<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    check(img)?;
    let out = RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        pixel(img, y as usize, x as usize)
    });
    save(&out, path)
}

/// Tiles rows of equally sized images into one PNG with a 1-pixel gap.
/// `None` cells stay blank.
pub fn save_grid<T: Real>(path: &Path, rows: &[Vec<Option<Tensor<T>>>]) -> Result<()> {
    let first = rows
        .iter()
        .flatten()
        .flatten()
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty image grid".into()))?;
    let (h, w) = (first.height(), first.width());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gap = 1;
    let mut out = RgbImage::from_pixel(
        (cols * (w + gap) + gap) as u32,
        (rows.len() * (h + gap) + gap) as u32,
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let Some(img) = cell else { continue };
            check(img)?;
            if img.height() != h || img.width() != w {
                return Err(Error::ShapeMismatch("grid images differ in size".into()));
            }
            let (oy, ox) = (gap + r * (h + gap), gap + c * (w + gap));
            for y in 0..h {
                for x in 0..w {
                    out.put_pixel((ox + x) as u32, (oy + y) as u32, pixel(img, y, x));
                }
            }
        }
    }
    save(&out, path)
}
