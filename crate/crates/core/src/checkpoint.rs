//! Single-file binary container: magic, manifest length, JSON manifest, then
//! little-endian tensor payloads. Used for training state, attribute
//! classifiers and SVMs. Contains no timestamps, so equal state gives equal
//! bytes.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::GeneratorConfig;
use crate::dataset::BatchCursor;
use crate::discriminator::Discriminator;
use crate::error::{Error, IoContext, Result};
use crate::metrics::{AttributeClassifier, LinearSvm};
use crate::nn::Parameters;
use crate::scalar::Element;
use crate::tensor::Tensor;
use crate::training::{TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"SGANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Accumulates tensors for one container file.
#[derive(Default)]
pub struct ContainerWriter {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl ContainerWriter {
    pub fn push<T: Element>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let offset = self.payload.len();
        for &v in tensor.data() {
            v.write_le(&mut self.payload);
        }
        self.entries.push(TensorEntry {
            name: name.into(),
            dtype: T::DTYPE.into(),
            shape: tensor.shape().to_vec(),
            offset,
            bytes: self.payload.len() - offset,
        });
    }

    pub fn push_params<T: Element, P: Parameters<T>>(&mut self, prefix: &str, params: &P) {
        for p in params.param_refs() {
            self.push(format!("{prefix}/{}", p.name), p.tensor);
        }
    }

    pub fn to_bytes(self, kind: &str, meta: serde_json::Value) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            meta,
            tensors: self.entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Writes the container and returns the SHA-256 of its bytes.
    pub fn write(self, path: &Path, kind: &str, meta: serde_json::Value) -> Result<String> {
        let bytes = self.to_bytes(kind, meta)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// A parsed container.
pub struct Container {
    pub manifest: Manifest,
    payload: Vec<u8>,
    index: HashMap<String, usize>,
}

impl Container {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing magic header".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported",
                manifest.format_version
            )));
        }
        let payload = bytes[16 + len..].to_vec();
        for e in &manifest.tensors {
            if e.offset + e.bytes > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)));
            }
        }
        let index = manifest.tensors.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Ok(Self {
            manifest,
            payload,
            index,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` container, found `{}`",
                self.manifest.kind
            )));
        }
        Ok(())
    }

    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let e = &self.manifest.tensors[*self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?];
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {}, expected {}",
                e.dtype,
                T::DTYPE
            )));
        }
        let n: usize = e.shape.iter().product();
        if n * T::BYTES != e.bytes {
            return Err(Error::Checkpoint(format!("tensor `{name}` has inconsistent size")));
        }
        let data = self.payload[e.offset..e.offset + e.bytes]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        Tensor::from_vec(&e.shape, data)
    }

    /// Overwrites every parameter of `params` with `prefix/<name>`.
    pub fn load_params<T: Element, P: Parameters<T>>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let names: Vec<String> = params.param_refs().into_iter().map(|p| p.name).collect();
        for (name, dst) in names.iter().zip(params.param_tensors_mut()) {
            let src = self.tensor::<T>(&format!("{prefix}/{name}"))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{prefix}/{name}` has shape {:?}, network expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(())
    }
}

pub const TRAINER_KIND: &str = "trainer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("invalid rng {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

/// Everything in a training checkpoint besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerMeta {
    pub dtype: String,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub images_seen: u64,
    pub g_opt_step: u64,
    pub d_opt_step: u64,
    pub rng: RngState,
    pub data_cursor: Option<BatchCursor>,
    /// Free-form echo of the surrounding experiment configuration.
    pub extra: serde_json::Value,
}

fn push_adam<T: Element>(w: &mut ContainerWriter, prefix: &str, m: &[Tensor<T>], v: &[Tensor<T>]) {
    for (i, (mi, vi)) in m.iter().zip(v).enumerate() {
        w.push(format!("{prefix}/m/{i}"), mi);
        w.push(format!("{prefix}/v/{i}"), vi);
    }
}

fn load_adam<T: Element>(c: &Container, prefix: &str, m: &mut [Tensor<T>], v: &mut [Tensor<T>]) -> Result<()> {
    for (i, (mi, vi)) in m.iter_mut().zip(v.iter_mut()).enumerate() {
        for (dst, which) in [(mi, "m"), (vi, "v")] {
            let src = c.tensor::<T>(&format!("{prefix}/{which}/{i}"))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!("`{prefix}/{which}/{i}` has the wrong shape")));
            }
            *dst = src;
        }
    }
    Ok(())
}

/// Writes the full training state; returns the file's SHA-256.
pub fn save_trainer<T: Element>(
    path: &Path,
    trainer: &Trainer<T>,
    data_cursor: Option<BatchCursor>,
    extra: serde_json::Value,
) -> Result<String> {
    let mut w = ContainerWriter::default();
    w.push_params("gen", &trainer.gen);
    w.push_params("gen_ema", &trainer.gen_ema);
    w.push_params("disc", &trainer.disc);
    push_adam(&mut w, "g_opt", &trainer.g_opt.m, &trainer.g_opt.v);
    push_adam(&mut w, "d_opt", &trainer.d_opt.m, &trainer.d_opt.v);
    let meta = TrainerMeta {
        dtype: T::DTYPE.into(),
        generator: trainer.gen.config().clone(),
        train: trainer.config.clone(),
        step: trainer.step,
        images_seen: trainer.images_seen,
        g_opt_step: trainer.g_opt.step,
        d_opt_step: trainer.d_opt.step,
        rng: RngState::capture(&trainer.rng),
        data_cursor,
        extra,
    };
    w.write(path, TRAINER_KIND, serde_json::to_value(meta)?)
}

pub fn read_trainer_meta(container: &Container) -> Result<TrainerMeta> {
    container.expect_kind(TRAINER_KIND)?;
    Ok(serde_json::from_value(container.manifest.meta.clone())?)
}

/// Restores a trainer saved by [`save_trainer`], bit for bit.
pub fn load_trainer<T: Element>(path: &Path) -> Result<(Trainer<T>, TrainerMeta)> {
    let c = Container::read(path)?;
    let meta = read_trainer_meta(&c)?;
    if meta.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, expected {}",
            meta.dtype,
            T::DTYPE
        )));
    }
    let mut t: Trainer<T> = Trainer::new(&meta.generator, meta.train.clone())?;
    c.load_params("gen", &mut t.gen)?;
    c.load_params("gen_ema", &mut t.gen_ema)?;
    c.load_params("disc", &mut t.disc)?;
    load_adam(&c, "g_opt", &mut t.g_opt.m, &mut t.g_opt.v)?;
    load_adam(&c, "d_opt", &mut t.d_opt.m, &mut t.d_opt.v)?;
    t.g_opt.step = meta.g_opt_step;
    t.d_opt.step = meta.d_opt_step;
    t.rng = meta.rng.restore()?;
    t.step = meta.step;
    t.images_seen = meta.images_seen;
    Ok((t, meta))
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path).at(path)?)))
}

pub const CLASSIFIER_KIND: &str = "attribute_classifier";

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    name: String,
    arch: GeneratorConfig,
}

pub fn save_classifier(path: &Path, classifier: &AttributeClassifier) -> Result<String> {
    let mut w = ContainerWriter::default();
    w.push_params("net", &classifier.net);
    let meta = ClassifierMeta {
        name: classifier.name.clone(),
        arch: classifier.arch.clone(),
    };
    w.write(path, CLASSIFIER_KIND, serde_json::to_value(meta)?)
}

pub fn load_classifier(path: &Path) -> Result<AttributeClassifier> {
    let c = Container::read(path)?;
    c.expect_kind(CLASSIFIER_KIND)?;
    let meta: ClassifierMeta = serde_json::from_value(c.manifest.meta.clone())?;
    let mut net: Discriminator<f32> = Discriminator::init(&meta.arch, false, 0)?;
    c.load_params("net", &mut net)?;
    Ok(AttributeClassifier {
        name: meta.name,
        arch: meta.arch,
        net,
    })
}

pub const SVM_KIND: &str = "linear_svm";

pub fn save_svm(path: &Path, attribute: &str, svm: &LinearSvm) -> Result<String> {
    let mut w = ContainerWriter::default();
    w.push("normal", &Tensor::from_vec(&[svm.normal.len()], svm.normal.clone())?);
    w.push("offset", &Tensor::from_vec(&[1], vec![svm.offset])?);
    w.write(path, SVM_KIND, serde_json::json!({ "attribute": attribute }))
}

pub fn load_svm(path: &Path) -> Result<(String, LinearSvm)> {
    let c = Container::read(path)?;
    c.expect_kind(SVM_KIND)?;
    let attribute = c.manifest.meta["attribute"].as_str().unwrap_or_default().to_string();
    Ok((
        attribute,
        LinearSvm {
            normal: c.tensor::<f64>("normal")?.into_data(),
            offset: c.tensor::<f64>("offset")?.data()[0],
            objective_history: Vec::new(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_corruption() {
        let mut w = ContainerWriter::default();
        let a = Tensor::from_vec(&[2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1f64, 0.2, 0.3]).unwrap();
        w.push("a", &a);
        w.push("b", &b);
        let bytes = w.to_bytes("test", serde_json::json!({"k": 1})).unwrap();
        let c = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c.tensor::<f32>("a").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
        assert_eq!(c.tensor::<f64>("b").unwrap(), b);
        assert!(c.tensor::<f64>("a").is_err());
        assert!(c.tensor::<f32>("missing").is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(3);
        let _: [u64; 7] = rng.random();
        let mut restored = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }
}
