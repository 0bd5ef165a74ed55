//! Declarative experiment plans (presets `config_a` … `config_f`) and the
//! resumable training run that evaluates metrics on EMA snapshots and
//! writes logs, curves, sample sheets and final reports.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_classifier, load_trainer, save_classifier, save_trainer};
use crate::config::GeneratorConfig;
use crate::dataset::{load_dataset, BatchCursor, BatchSource, Batches, Dataset, DatasetSource, DatasetSpec, SYNTH_FACTORS};
use crate::error::{Error, IoContext, Result};
use crate::generator::{Generator, LatentImageGenerator};
use crate::images::save_grid;
use crate::latent::{draw_z, LatentSpace};
use crate::metrics::{
    config_hash, extract_features, fid, perceptual_path_length, separability_score, train_attribute_classifier,
    write_reports, AttributeClassifier, ClassifierConfig, MetricReport, PathLengthConfig, SeparabilityConfig,
    SvmConfig,
};
use crate::sampling::{generate_images, mixing_grid, truncation_cutoff, truncation_sweep, w_center, DEFAULT_PSI_GRID};
use crate::tensor::Tensor;
use crate::training::{LossKind, StepLog, TrainConfig, Trainer};

pub const SCHEMA_VERSION: u32 = 1;
pub const METRICS_CSV_HEADER: &str = "images_seen,fid_proxy,ppl_z,ppl_w,separability";
const DATA_SEED_SALT: u64 = 0xda7a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    /// Image counts at which metrics are evaluated; strictly increasing.
    pub metric_images: Vec<u64>,
    pub checkpoint_every_images: u64,
    /// Bounded prefetch queue depth; 0 loads batches inline.
    pub prefetch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsPlan {
    pub fid_samples: usize,
    pub feature_extractor: String,
    pub ppl_samples: usize,
    pub ppl_epsilon: f64,
    pub ppl_metric: String,
    pub ppl_crop: bool,
    pub ppl_crop_fraction: f64,
    /// Train one classifier per labeled attribute and track separability.
    pub separability: bool,
    pub separability_pool: usize,
    pub classifier: ClassifierConfig,
    pub svm: SvmConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsPlan {
    pub sample_seeds: usize,
    pub mixing_sources: usize,
    pub mixing_destinations: usize,
    pub truncation_psis: Vec<f64>,
    pub truncation_seeds: usize,
    pub truncation_max_resolution: usize,
    pub w_center_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub schema_version: u32,
    pub name: String,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub schedule: Schedule,
    pub metrics: MetricsPlan,
    pub outputs: OutputsPlan,
}

impl ExperimentPlan {
    /// Desk-scale plan for one row of the ablation ladder.
    pub fn preset(name: &str) -> Result<Self> {
        let generator = GeneratorConfig::preset(name)?;
        let key = name.trim().to_ascii_lowercase();
        let letter = key.strip_prefix("config_").unwrap_or(&key).to_string();
        let train = TrainConfig {
            loss: if letter == "a" { LossKind::WganGp } else { LossKind::NonsatR1 },
            mixing_prob: if letter == "f" { 0.9 } else { 0.0 },
            ..TrainConfig::default()
        };
        let total = train.total_images;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            name: format!("config_{letter}"),
            output_dir: PathBuf::from(format!("config_{letter}")),
            dataset: DatasetSpec {
                source: DatasetSource::Synthetic {
                    factors: 2,
                    count: 10_000,
                    seed: 0,
                },
                resolution: generator.resolution,
                mirror_augment: false,
            },
            generator,
            train,
            schedule: Schedule {
                metric_images: (0..=4).map(|k| k * total / 4).collect(),
                checkpoint_every_images: 10_000,
                prefetch: 2,
            },
            metrics: MetricsPlan {
                fid_samples: 2_000,
                feature_extractor: "random-conv".into(),
                ppl_samples: 2_000,
                ppl_epsilon: 1e-4,
                ppl_metric: "proxy".into(),
                ppl_crop: false,
                ppl_crop_fraction: crate::perceptual::DEFAULT_CROP_FRACTION,
                separability: false,
                separability_pool: 2_000,
                classifier: ClassifierConfig::default(),
                svm: SvmConfig::default(),
                seed: 0,
            },
            outputs: OutputsPlan {
                sample_seeds: 16,
                mixing_sources: 4,
                mixing_destinations: 2,
                truncation_psis: DEFAULT_PSI_GRID.to_vec(),
                truncation_seeds: 4,
                truncation_max_resolution: crate::sampling::DEFAULT_TRUNCATION_MAX_RESOLUTION,
                w_center_samples: 4_096,
            },
        })
    }

    /// Parses a plan file. A top-level `preset` key supplies defaults that
    /// the rest of the file overrides; `overrides` are `dotted.key=value`
    /// pairs applied last.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(file, overrides)
    }

    pub fn from_table(mut file: toml::Table, overrides: &[String]) -> Result<Self> {
        let mut merged = match file.remove("preset") {
            Some(toml::Value::String(p)) => toml::Value::try_from(Self::preset(&p)?).map_err(config_err)?,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => toml::Value::Table(toml::Table::new()),
        };
        merge(&mut merged, toml::Value::Table(file));
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let plan: Self = merged.try_into().map_err(config_err)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.generator.validate()?;
        self.train.validate()?;
        if self.dataset.resolution != self.generator.resolution {
            return Err(Error::Config(format!(
                "dataset resolution {} differs from generator resolution {}",
                self.dataset.resolution, self.generator.resolution
            )));
        }
        if self.generator.image_channels != 3 {
            return Err(Error::Config("datasets decode to 3 channels; set image_channels = 3".into()));
        }
        if let DatasetSource::Synthetic { factors, .. } = self.dataset.source {
            if self.dataset.mirror_augment && factors >= 1 {
                return Err(Error::Config(format!(
                    "synthetic attribute `{}` is flip-sensitive; disable mirror_augment",
                    SYNTH_FACTORS[0]
                )));
            }
        }
        if self.schedule.metric_images.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("metric schedule must be strictly increasing".into()));
        }
        if self.schedule.checkpoint_every_images == 0 {
            return Err(Error::Config("checkpoint_every_images must be positive".into()));
        }
        if self.metrics.fid_samples < 2 || self.metrics.ppl_samples == 0 {
            return Err(Error::Config("fid_samples must be ≥ 2 and ppl_samples ≥ 1".into()));
        }
        Ok(())
    }

    /// The plan without `output_dir`, as echoed beside every reported number.
    pub fn config_echo(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        Ok(v)
    }

    /// Hash of [`Self::config_echo`], so relocated runs agree.
    pub fn config_hash(&self) -> Result<String> {
        config_hash(&self.config_echo()?)
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.output_dir)
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Deep merge; a table carrying a different `kind` tag replaces the base
/// table instead of merging into it.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(bv @ toml::Value::Table(_)) if v.is_table() && bv.get("kind") == v.get("kind") => merge(bv, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub images_seen: u64,
    pub fid_proxy: f64,
    pub ppl_z: f64,
    pub ppl_w: f64,
    pub separability: Option<f64>,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        let sep = self.separability.map(|s| s.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.images_seen, self.fid_proxy, self.ppl_z, self.ppl_w, sep)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidArgument(format!("malformed metrics row `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        Ok(Self {
            images_seen: f[0].trim().parse().map_err(|_| bad())?,
            fid_proxy: num(f[1])?,
            ppl_z: num(f[2])?,
            ppl_w: num(f[3])?,
            separability: if f[4].trim().is_empty() { None } else { Some(num(f[4])?) },
        })
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_CSV_HEADER => {}
        _ => return Err(Error::InvalidArgument(format!("{} lacks the metrics header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricRow::parse).collect()
}

/// Scheduled metric evaluation with cached real-image features and
/// attribute classifiers.
pub struct Evaluator {
    plan: MetricsPlan,
    real_features: Vec<Vec<f64>>,
    classifiers: Vec<AttributeClassifier>,
}

impl Evaluator {
    /// Trains (or loads cached) classifiers into `classifier_dir` when
    /// separability is enabled.
    pub fn new(plan: &MetricsPlan, data: &Dataset, classifier_dir: &Path) -> Result<Self> {
        let reals: Vec<Tensor<f64>> = data.images.iter().take(plan.fid_samples).map(Tensor::cast).collect();
        let real_features = extract_features(&reals, &plan.feature_extractor)?;
        let mut classifiers = Vec::new();
        if plan.separability {
            if data.attributes.is_empty() {
                return Err(Error::Config("separability needs a labeled dataset".into()));
            }
            for (k, attr) in data.attributes.iter().enumerate() {
                let path = classifier_dir.join(format!("{}.ckpt", attr.name));
                let c = if path.exists() {
                    load_classifier(&path)?
                } else {
                    let c = train_attribute_classifier(&attr.name, &data.images, &data.attribute_labels(k), &plan.classifier)?;
                    save_classifier(&path, &c)?;
                    c
                };
                classifiers.push(c);
            }
        }
        Ok(Self {
            plan: plan.clone(),
            real_features,
            classifiers,
        })
    }

    pub fn path_length_config(&self, space: LatentSpace) -> PathLengthConfig {
        PathLengthConfig {
            space,
            epsilon: self.plan.ppl_epsilon,
            samples: self.plan.ppl_samples,
            endpoints_only: false,
            crop: self.plan.ppl_crop,
            crop_fraction: self.plan.ppl_crop_fraction,
            metric: self.plan.ppl_metric.clone(),
            seed: self.plan.seed,
        }
    }

    pub fn separability_config(&self, space: LatentSpace) -> SeparabilityConfig {
        SeparabilityConfig {
            space,
            pool: self.plan.separability_pool,
            svm: self.plan.svm.clone(),
            seed: self.plan.seed,
        }
    }

    pub fn fid(&self, gen: &dyn LatentImageGenerator) -> Result<f64> {
        let fakes = (0..self.plan.fid_samples)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
                rng.set_stream(i as u64);
                let z = draw_z(&mut rng, gen.z_dim(), gen.z_distribution());
                gen.generate(&z, rng.random())
            })
            .collect::<Result<Vec<_>>>()?;
        fid(&self.real_features, &extract_features(&fakes, &self.plan.feature_extractor)?)
    }

    pub fn ppl(&self, gen: &dyn LatentImageGenerator, space: LatentSpace) -> Result<f64> {
        let cfg = self.path_length_config(space);
        Ok(perceptual_path_length(gen, &cfg, cfg.distance()?.as_ref())?.mean)
    }

    pub fn separability(&self, gen: &dyn LatentImageGenerator, space: LatentSpace) -> Result<Option<f64>> {
        if self.classifiers.is_empty() {
            return Ok(None);
        }
        Ok(Some(separability_score(gen, &self.classifiers, &self.separability_config(space))?.score))
    }

    /// All scheduled metrics on a 64-bit copy of the EMA generator.
    pub fn evaluate(&self, ema: &Generator<f32>, images_seen: u64) -> Result<MetricRow> {
        let gen: Generator<f64> = ema.cast();
        Ok(MetricRow {
            images_seen,
            fid_proxy: self.fid(&gen)?,
            ppl_z: self.ppl(&gen, LatentSpace::Z)?,
            ppl_w: self.ppl(&gen, LatentSpace::W)?,
            separability: self.separability(&gen, LatentSpace::W)?,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `checkpoint.ckpt` in the run directory when present.
    pub resume: bool,
    /// Stop (without saving) after this many steps in this invocation;
    /// simulates an interrupted run.
    pub stop_after_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub completed: bool,
    pub step: u64,
    pub images_seen: u64,
    /// SHA-256 of the final checkpoint (empty when interrupted).
    pub checkpoint_hash: String,
    pub metrics: Vec<MetricRow>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: u64,
    images_seen: u64,
    d_loss: f64,
    g_loss: f64,
    r1: f64,
    time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mixed_fraction: Option<&'a f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunExtra {
    config_hash: String,
    last_metric_images: Option<u64>,
}

/// Keeps the header plus the lines for which `keep` holds.
fn truncate_lines(path: &Path, header: bool, keep: impl Fn(&str) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).at(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if (header && i == 0) || keep(line) {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out).at(path)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    writeln!(f, "{line}").at(path)
}

fn metric_due(schedule: &[u64], last: Option<u64>, images_seen: u64) -> bool {
    schedule
        .iter()
        .any(|&p| p <= images_seen && last.is_none_or(|l| p > l))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Trains according to `plan` under `root`, resuming when asked.
pub fn run_experiment(plan: &ExperimentPlan, root: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    plan.validate()?;
    let dir = plan.run_dir(root);
    std::fs::create_dir_all(&dir).at(&dir)?;
    let hash = plan.config_hash()?;
    let plan_path = dir.join("plan.toml");
    std::fs::write(&plan_path, plan.to_toml()?).at(&plan_path)?;
    let meta_path = dir.join("metrics_meta.json");
    std::fs::write(
        &meta_path,
        serde_json::to_vec_pretty(&serde_json::json!({
            "config_hash": hash,
            "seed": plan.metrics.seed,
            "train_seed": plan.train.seed,
            "entropy_units": "bits; separability = exp(sum of bits)",
        }))?,
    )
    .at(&meta_path)?;

    let data = Arc::new(load_dataset(&plan.dataset)?);
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let log_path = dir.join("logs.jsonl");
    let csv_path = dir.join("metrics.csv");

    let (mut trainer, cursor, mut last_metric) = if opts.resume && ckpt_path.exists() {
        let (t, meta) = load_trainer::<f32>(&ckpt_path)?;
        let extra: RunExtra = serde_json::from_value(meta.extra.clone())?;
        if extra.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint belongs to config {} but the plan hashes to {hash}",
                extra.config_hash
            )));
        }
        let (step, seen) = (t.step, t.images_seen);
        truncate_lines(&log_path, false, |l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v["step"].as_u64())
                .is_some_and(|s| s <= step)
        })?;
        truncate_lines(&csv_path, true, |l| MetricRow::parse(l).is_ok_and(|r| r.images_seen <= seen))?;
        (t, meta.data_cursor.unwrap_or_default(), extra.last_metric_images)
    } else {
        for p in [&log_path, &csv_path] {
            if p.exists() {
                std::fs::remove_file(p).at(p)?;
            }
        }
        (Trainer::<f32>::new(&plan.generator, plan.train.clone())?, BatchCursor::default(), None)
    };
    if !csv_path.exists() {
        std::fs::write(&csv_path, format!("{METRICS_CSV_HEADER}\n")).at(&csv_path)?;
    }

    let evaluator = Evaluator::new(&plan.metrics, &data, &dir.join("classifiers"))?;
    let batches = Batches::new(
        data.clone(),
        plan.train.batch_size,
        plan.train.seed ^ DATA_SEED_SALT,
        plan.dataset.mirror_augment,
        cursor,
    )?;
    let mut source = BatchSource::new(batches, plan.schedule.prefetch);
    let schedule = &plan.schedule.metric_images;
    let started = Instant::now();

    let evaluate = |trainer: &Trainer<f32>, last: &mut Option<u64>| -> Result<()> {
        let row = evaluator.evaluate(&trainer.gen_ema, trainer.images_seen)?;
        append_line(&csv_path, &row.csv())?;
        log::info!("metrics at {} images: {:?}", trainer.images_seen, row);
        *last = Some(trainer.images_seen);
        Ok(())
    };

    if metric_due(schedule, last_metric, trainer.images_seen) {
        evaluate(&trainer, &mut last_metric)?;
    }
    let every = plan.schedule.checkpoint_every_images;
    let mut steps_here = 0u64;
    while trainer.images_seen < plan.train.total_images {
        if opts.stop_after_steps.is_some_and(|n| steps_here >= n) {
            return Ok(RunOutcome {
                dir,
                completed: false,
                step: trainer.step,
                images_seen: trainer.images_seen,
                checkpoint_hash: String::new(),
                metrics: read_metrics_csv(&csv_path)?,
            });
        }
        let before = trainer.images_seen;
        let batch = source.next_batch()?;
        let log: StepLog = trainer.train_step(&batch)?;
        steps_here += 1;
        let line = LogLine {
            step: log.step,
            images_seen: log.images_seen,
            d_loss: log.d_loss,
            g_loss: log.g_loss,
            r1: log.r1,
            time: started.elapsed().as_secs_f64(),
            mixed_fraction: Some(&log.mixed_fraction),
        };
        append_line(&log_path, &serde_json::to_string(&line)?)?;
        if metric_due(schedule, last_metric, trainer.images_seen) {
            evaluate(&trainer, &mut last_metric)?;
        }
        if trainer.images_seen / every > before / every {
            let extra = RunExtra {
                config_hash: hash.clone(),
                last_metric_images: last_metric,
            };
            save_trainer(&ckpt_path, &trainer, Some(source.cursor()), serde_json::to_value(extra)?)?;
        }
    }
    if last_metric != Some(trainer.images_seen) {
        evaluate(&trainer, &mut last_metric)?;
    }
    let extra = RunExtra {
        config_hash: hash.clone(),
        last_metric_images: last_metric,
    };
    let checkpoint_hash = save_trainer(&ckpt_path, &trainer, Some(source.cursor()), serde_json::to_value(extra)?)?;
    drop(source);

    let ema: Generator<f64> = trainer.gen_ema.cast();
    write_sheets(&ema, &plan.outputs, &dir)?;
    let rows = read_metrics_csv(&csv_path)?;
    let last = rows.last().cloned();
    let mut reports = Vec::new();
    if let Some(row) = &last {
        let cfg = plan.config_echo()?;
        let report = |metric: &str, space: &str, value: f64| MetricReport {
            metric: metric.into(),
            space: space.into(),
            value,
            config_hash: hash.clone(),
            seed: plan.metrics.seed,
            config: cfg.clone(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        reports.push(report("fid_proxy", "", row.fid_proxy));
        reports.push(report("ppl", "z", row.ppl_z));
        reports.push(report("ppl", "w", row.ppl_w));
        if let Some(sep_z) = evaluator.separability(&ema, LatentSpace::Z)? {
            reports.push(report("separability", "z", sep_z));
        }
        if let Some(sep_w) = row.separability {
            reports.push(report("separability", "w", sep_w));
        }
    }
    write_reports(&dir, &reports)?;
    crate::report::emit_report(std::slice::from_ref(&dir), &dir.join("report"))?;
    Ok(RunOutcome {
        dir,
        completed: true,
        step: trainer.step,
        images_seen: trainer.images_seen,
        checkpoint_hash,
        metrics: rows,
    })
}

/// Sample grid, mixing sheet and truncation sweep for a generator.
pub fn write_sheets(gen: &Generator<f64>, outputs: &OutputsPlan, dir: &Path) -> Result<()> {
    let n = outputs.sample_seeds;
    if n > 0 {
        let side = (n as f64).sqrt().ceil() as usize;
        let seeds: Vec<u64> = (0..n as u64).collect();
        let mut imgs = generate_images(gen, &seeds, None)?.into_iter().map(Some);
        let rows: Vec<Vec<Option<Tensor<f64>>>> = (0..n.div_ceil(side))
            .map(|_| imgs.by_ref().take(side).collect())
            .collect();
        save_grid(&dir.join("samples.png"), &rows)?;
    }
    if outputs.mixing_sources > 0 && outputs.mixing_destinations > 0 {
        let src: Vec<u64> = (0..outputs.mixing_sources as u64).map(|s| 1000 + s).collect();
        let dst: Vec<u64> = (0..outputs.mixing_destinations as u64).map(|s| 2000 + s).collect();
        save_grid(&dir.join("mixing.png"), &mixing_grid(gen, &src, &dst)?)?;
    }
    if outputs.truncation_seeds > 0 && !outputs.truncation_psis.is_empty() {
        let w_bar = w_center(gen, outputs.w_center_samples.max(1), 0)?;
        let cutoff = truncation_cutoff(gen.config(), outputs.truncation_max_resolution);
        let seeds: Vec<u64> = (0..outputs.truncation_seeds as u64).map(|s| 3000 + s).collect();
        save_grid(
            &dir.join("truncation.png"),
            &truncation_sweep(gen, &seeds, &outputs.truncation_psis, &w_bar, cutoff)?,
        )?;
    }
    Ok(())
}
