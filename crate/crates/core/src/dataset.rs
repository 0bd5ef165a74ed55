//! Image datasets: directory ingestion, the procedural factor dataset and a
//! seeded, resumable minibatch stream with optional mirror augmentation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Directory {
        path: PathBuf,
        /// Optional CSV with a `file` column followed by 0/1 attribute columns.
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    Synthetic {
        factors: usize,
        count: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub resolution: usize,
    pub mirror_augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    /// The label changes meaning under a horizontal flip.
    pub flip_sensitive: bool,
}

/// Decoded images as `[3, R, R]` tensors in `[-1, 1]`, with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub attributes: Vec<Attribute>,
    /// `labels[i][a]` is attribute `a` of image `i`; empty when unlabeled.
    pub labels: Vec<Vec<bool>>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.first().map_or(0, Tensor::height)
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownName(format!("attribute `{name}`")))
    }

    /// Labels of one attribute across the dataset.
    pub fn attribute_labels(&self, index: usize) -> Vec<bool> {
        self.labels.iter().map(|l| l[index]).collect()
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 4 || !resolution.is_power_of_two() {
        return Err(Error::Config(format!(
            "resolution must be a power of two ≥ 4, got {resolution}"
        )));
    }
    Ok(())
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    check_resolution(spec.resolution)?;
    let data = match &spec.source {
        DatasetSource::Directory { path, labels } => load_directory(path, labels.as_deref(), spec.resolution)?,
        DatasetSource::Synthetic { factors, count, seed } => synth_dataset(*factors, spec.resolution, *count, *seed)?,
    };
    if spec.mirror_augment {
        if let Some(a) = data.attributes.iter().find(|a| a.flip_sensitive) {
            return Err(Error::Config(format!(
                "attribute `{}` is flip-sensitive and cannot be used with mirror augmentation",
                a.name
            )));
        }
    }
    Ok(data)
}

fn image_to_tensor(img: &image::DynamicImage, resolution: usize) -> Tensor<f32> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let square = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let r = resolution as u32;
    let rgb = square.resize_exact(r, r, FilterType::Triangle).to_rgb8();
    let plane = resolution * resolution;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 127.5 - 1.0;
        }
    }
    Tensor::from_vec(&[3, resolution, resolution], data).expect("shape matches pixel count")
}

fn read_label_csv(path: &Path) -> Result<(Vec<String>, HashMap<String, Vec<bool>>)> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no header", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 2 || header[0] != "file" {
        return Err(Error::InvalidArgument(format!(
            "{}: header must be `file,<attribute>...`",
            path.display()
        )));
    }
    let mut rows = HashMap::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(Error::InvalidArgument(format!("{} row {}: wrong column count", path.display(), n + 2)));
        }
        let values = fields[1..]
            .iter()
            .map(|f| match *f {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                other => Err(Error::InvalidArgument(format!("label value `{other}`"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        rows.insert(fields[0].to_string(), values);
    }
    Ok((header[1..].to_vec(), rows))
}

fn load_directory(dir: &Path, labels: Option<&Path>, resolution: usize) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()).at(dir))
        .collect::<Result<_>>()?;
    files.retain(|p| p.is_file() && Some(p.as_path()) != labels);
    files.sort();
    let label_table = labels.map(read_label_csv).transpose()?;
    let mut data = Dataset {
        images: Vec::new(),
        attributes: label_table
            .as_ref()
            .map(|(names, _)| {
                names
                    .iter()
                    .map(|n| Attribute {
                        name: n.clone(),
                        flip_sensitive: false,
                    })
                    .collect()
            })
            .unwrap_or_default(),
        labels: Vec::new(),
        skipped: 0,
    };
    for file in &files {
        let img = match image::open(file) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                data.skipped += 1;
                continue;
            }
        };
        if let Some((_, rows)) = &label_table {
            let key = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let row = rows
                .get(key)
                .ok_or_else(|| Error::InvalidArgument(format!("no labels for {key}")))?;
            data.labels.push(row.clone());
        }
        data.images.push(image_to_tensor(&img, resolution));
    }
    if data.skipped > 0 {
        log::warn!("{}: skipped {} unreadable files", dir.display(), data.skipped);
    }
    if data.images.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    Ok(data)
}

/// Names of the procedural factors, in the order they are enabled.
pub const SYNTH_FACTORS: [&str; 4] = ["right_half", "bright", "blue", "vertical_stripes"];
const DARK: f32 = -0.7;
const BRIGHT: f32 = 0.3;
const JITTER: f32 = 0.05;

/// Procedural images of a square object. Enabled factors, each an
/// independent fair coin: object in the right half (flip-sensitive), bright
/// background, blue rather than red object, vertical rather than horizontal
/// stripes. Disabled factors render as a white, unstriped object.
/// Image `i` draws from stream `i` of `seed`.
pub fn synth_dataset(factors: usize, resolution: usize, count: usize, seed: u64) -> Result<Dataset> {
    if factors == 0 || factors > SYNTH_FACTORS.len() {
        return Err(Error::InvalidArgument(format!(
            "factors must lie in 1..={}, got {factors}",
            SYNTH_FACTORS.len()
        )));
    }
    check_resolution(resolution)?;
    if resolution < 8 {
        return Err(Error::Config("synthetic images need resolution ≥ 8".into()));
    }
    let r = resolution;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let bits: Vec<bool> = (0..factors).map(|_| rng.random()).collect();
        let flag = |k: usize| bits.get(k).copied();
        let bg = if flag(1) == Some(true) { BRIGHT } else { DARK };
        let color: [f32; 3] = match flag(2) {
            Some(true) => [-0.6, -0.6, 0.9],
            Some(false) => [0.9, -0.6, -0.6],
            None => [0.9, 0.9, 0.9],
        };
        let side = r / 4 + rng.random_range(0..=r / 8);
        let half = r / 2;
        let x0 = if bits[0] {
            rng.random_range(half..=r - side - 1)
        } else {
            rng.random_range(1..=half - side)
        };
        let y0 = rng.random_range(1..=r - side - 1);
        let mut img = Tensor::zeros(&[3, r, r]);
        for y in 0..r {
            for x in 0..r {
                let inside = (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x);
                let dim = match flag(3) {
                    Some(true) => (x - x0.min(x)) % 2 == 1,
                    Some(false) => (y - y0.min(y)) % 2 == 1,
                    None => false,
                };
                for (c, &col) in color.iter().enumerate() {
                    let j: f32 = rng.random_range(-JITTER..=JITTER);
                    let v = if inside {
                        if dim {
                            0.5 * (col + bg)
                        } else {
                            col
                        }
                    } else {
                        bg + j
                    };
                    *img.at_mut(c, y, x) = v;
                }
            }
        }
        images.push(img);
        labels.push(bits);
    }
    Ok(Dataset {
        images,
        attributes: SYNTH_FACTORS[..factors]
            .iter()
            .enumerate()
            .map(|(k, n)| Attribute {
                name: (*n).to_string(),
                flip_sensitive: k == 0,
            })
            .collect(),
        labels,
        skipped: 0,
    })
}

/// Horizontal mirror of a `[C, H, W]` image.
pub fn mirror<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let w = x.width();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Position in the batch stream; enough to resume it exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCursor {
    pub epoch: u64,
    pub index: usize,
}

/// Seeded epoch-shuffled minibatches that wrap across epochs. Epoch `e`
/// uses stream `e` of the seed for its order and its mirror flips.
#[derive(Clone, Debug)]
pub struct Batches {
    data: Arc<Dataset>,
    seed: u64,
    batch_size: usize,
    mirror: bool,
    cursor: BatchCursor,
    order: Vec<usize>,
    flips: Vec<bool>,
}

impl Batches {
    pub fn new(data: Arc<Dataset>, batch_size: usize, seed: u64, mirror: bool, cursor: BatchCursor) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if cursor.index >= data.len() {
            return Err(Error::OutOfRange {
                index: cursor.index,
                len: data.len(),
            });
        }
        let mut b = Self {
            data,
            seed,
            batch_size,
            mirror,
            cursor,
            order: Vec::new(),
            flips: Vec::new(),
        };
        b.plan_epoch();
        Ok(b)
    }

    fn plan_epoch(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.cursor.epoch);
        self.order = (0..self.data.len()).collect();
        self.order.shuffle(&mut rng);
        self.flips = (0..self.data.len()).map(|_| self.mirror && rng.random::<bool>()).collect();
    }

    pub fn cursor(&self) -> BatchCursor {
        self.cursor
    }

    /// Next minibatch of `(dataset index, augmented image)`.
    pub fn next_indexed(&mut self) -> Vec<(usize, Tensor<f32>)> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            let pos = self.cursor.index;
            let idx = self.order[pos];
            let img = &self.data.images[idx];
            out.push((idx, if self.flips[pos] { mirror(img) } else { img.clone() }));
            self.cursor.index += 1;
            if self.cursor.index == self.data.len() {
                self.cursor = BatchCursor {
                    epoch: self.cursor.epoch + 1,
                    index: 0,
                };
                self.plan_epoch();
            }
        }
        out
    }

    pub fn next_batch(&mut self) -> Vec<Tensor<f32>> {
        self.next_indexed().into_iter().map(|(_, img)| img).collect()
    }
}

/// Background thread filling a bounded queue from a [`Batches`] stream.
/// Batches arrive in exactly the order the stream would produce them.
pub struct Prefetcher {
    rx: Option<Receiver<(Vec<Tensor<f32>>, BatchCursor)>>,
    handle: Option<JoinHandle<()>>,
    cursor: BatchCursor,
}

impl Prefetcher {
    pub fn spawn(mut batches: Batches, depth: usize) -> Self {
        let cursor = batches.cursor();
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || loop {
            let batch = batches.next_batch();
            if tx.send((batch, batches.cursor())).is_err() {
                break;
            }
        });
        Self {
            rx: Some(rx),
            handle: Some(handle),
            cursor,
        }
    }

    pub fn next_batch(&mut self) -> Result<Vec<Tensor<f32>>> {
        let (batch, cursor) = self
            .rx
            .as_ref()
            .and_then(|rx| rx.recv().ok())
            .ok_or_else(|| Error::InvalidArgument("prefetch worker stopped".into()))?;
        self.cursor = cursor;
        Ok(batch)
    }

    /// Cursor just past the last batch handed out.
    pub fn cursor(&self) -> BatchCursor {
        self.cursor
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        drop(self.rx.take());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Where minibatches come from during training.
pub enum BatchSource {
    Inline(Batches),
    Prefetched(Prefetcher),
}

impl BatchSource {
    pub fn new(batches: Batches, prefetch_depth: usize) -> Self {
        if prefetch_depth == 0 {
            Self::Inline(batches)
        } else {
            Self::Prefetched(Prefetcher::spawn(batches, prefetch_depth))
        }
    }

    pub fn next_batch(&mut self) -> Result<Vec<Tensor<f32>>> {
        match self {
            Self::Inline(b) => Ok(b.next_batch()),
            Self::Prefetched(p) => p.next_batch(),
        }
    }

    pub fn cursor(&self) -> BatchCursor {
        match self {
            Self::Inline(b) => b.cursor(),
            Self::Prefetched(p) => p.cursor(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_seeded_and_balanced() {
        let a = synth_dataset(4, 16, 400, 3).unwrap();
        assert_eq!(a, synth_dataset(4, 16, 400, 3).unwrap());
        assert_ne!(a.images, synth_dataset(4, 16, 400, 4).unwrap().images);
        assert!(a.images.iter().all(|x| x.shape() == [3, 16, 16]));
        assert!(a.attributes[0].flip_sensitive && !a.attributes[1].flip_sensitive);
        assert!(synth_dataset(0, 16, 1, 0).is_err());
        assert!(synth_dataset(5, 16, 1, 0).is_err());
    }

    #[test]
    fn mirror_is_involution() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
        assert_eq!(mirror(&mirror(&x)), x);
        assert_eq!(mirror(&x).at(1, 2, 0), x.at(1, 2, 3));
    }

    #[test]
    fn batches_resume_from_cursor() {
        let data = Arc::new(synth_dataset(2, 8, 10, 0).unwrap());
        let mut a = Batches::new(data.clone(), 4, 9, true, BatchCursor::default()).unwrap();
        let first: Vec<_> = (0..2).map(|_| a.next_batch()).collect();
        let mut b = Batches::new(data.clone(), 4, 9, true, a.cursor()).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        let mut c = Batches::new(data, 4, 9, true, BatchCursor::default()).unwrap();
        assert_eq!(first[0], c.next_batch());
    }

    #[test]
    fn prefetch_preserves_order() {
        let data = Arc::new(synth_dataset(1, 8, 7, 0).unwrap());
        let mut inline = Batches::new(data.clone(), 3, 1, true, BatchCursor::default()).unwrap();
        let mut pre = Prefetcher::spawn(Batches::new(data, 3, 1, true, BatchCursor::default()).unwrap(), 2);
        for _ in 0..6 {
            assert_eq!(inline.next_batch(), pre.next_batch().unwrap());
            assert_eq!(inline.cursor(), pre.cursor());
        }
    }

    #[test]
    fn mirrored_flip_sensitive_dataset_is_rejected() {
        let spec = DatasetSpec {
            source: DatasetSource::Synthetic {
                factors: 2,
                count: 4,
                seed: 0,
            },
            resolution: 16,
            mirror_augment: true,
        };
        assert!(matches!(load_dataset(&spec), Err(Error::Config(_))));
    }
}
