//! The training loop: per-epoch tuples, the λ curriculum, mini-batch
//! updates, per-epoch validation, checkpoints and metrics history.

mod checkpoint;

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use crate::augment::RandomErasingParams;
use crate::binio::write_atomic;
use crate::datagen::{DatasetManifest, Split};
use crate::embednet::{init_network, loss_gradients, ArchSpec, Optimizer, OptimizerKind, Parameters};
use crate::error::{ConfigIssues, Error, Result};
use crate::inference::{build_gallery, embed_all, knn_classify};
use crate::labeled::LabeledImage;
use crate::loss::{lambda_schedule, LambdaSchedule, LossBreakdown, LossConfig};
use crate::rng::derive_seed;
use crate::sampler::{epoch_tuples, AnomalySourcePolicy, SamplerConfig, TupleMode};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BATCHES_FILE: &str = "batches.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch:04}.bin")
}

/// Sampler settings that stay fixed across epochs; the epoch seed is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSpec {
    /// Number of step classes.
    pub n: usize,
    /// Images used per class.
    pub m: usize,
    pub anomaly_source: AnomalySourcePolicy,
    pub erasing: RandomErasingParams,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            n: 8,
            m: 40,
            anomaly_source: AnomalySourcePolicy::default(),
            erasing: RandomErasingParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TupleMode,
    pub total_epochs: usize,
    pub anomaly_start_epoch: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Neighbors for per-epoch validation.
    pub k: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub arch: ArchSpec,
    pub sampler: SamplingSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TupleMode::Quadruplet,
            total_epochs: 250,
            anomaly_start_epoch: 100,
            learning_rate: 1e-4,
            batch_size: 8,
            k: 10,
            seed: 0,
            checkpoint_every: 0,
            optimizer: OptimizerKind::default(),
            loss: LossConfig::default(),
            arch: ArchSpec::default(),
            sampler: SamplingSpec::default(),
        }
    }
}

fn absorb(issues: &mut ConfigIssues, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(list)) => list.into_iter().for_each(|s| issues.push(s)),
        Err(e) => issues.push(e.to_string()),
    }
}

impl TrainConfig {
    /// Reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues = ConfigIssues::new();
        issues.check(self.total_epochs >= 1, || "train.total_epochs must be >= 1".into());
        issues.check(self.anomaly_start_epoch < self.total_epochs, || {
            format!(
                "train.anomaly_start_epoch ({}) must be < total_epochs ({})",
                self.anomaly_start_epoch, self.total_epochs
            )
        });
        issues.check(self.learning_rate.is_finite() && self.learning_rate > 0.0, || {
            format!("train.learning_rate must be > 0 (got {})", self.learning_rate)
        });
        issues.check(self.batch_size >= 1, || "train.batch_size must be >= 1".into());
        issues.check(self.k >= 1, || "train.k must be >= 1".into());
        absorb(&mut issues, self.arch.validate());
        absorb(&mut issues, self.loss.validate());
        absorb(&mut issues, self.sampler_config(1).validate());
        issues.into_result()
    }

    pub fn lambda_schedule(&self) -> LambdaSchedule {
        LambdaSchedule {
            anomaly_start_epoch: self.anomaly_start_epoch,
            total_epochs: self.total_epochs,
            shape: self.loss.ramp,
        }
    }

    pub fn sampler_config(&self, epoch: usize) -> SamplerConfig {
        SamplerConfig {
            n: self.sampler.n,
            m: self.sampler.m,
            mode: self.mode,
            anomaly_source: self.sampler.anomaly_source,
            erasing: self.sampler.erasing,
            epoch_seed: derive_seed(self.seed, &[0xE90C, epoch as u64]),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Domain(format!("serializing config: {e}")))
    }
}

/// One completed epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// NaN when there is no validation split.
    pub val_acc: f64,
    /// Mean anchor-positive distance over the epoch's tuples.
    pub d_intra: f64,
    /// Mean anchor distance to negatives from an adjacent step.
    pub d_adjacent: f64,
    /// Mean anomaly-to-centroid distance.
    pub d_anomaly: f64,
    pub lambda: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

pub const METRICS_HEADER: &str = "epoch,loss,val_acc,d_intra,d_adjacent,d_anomaly,lambda,seconds";

impl EpochRecord {
    /// `seconds` is written as 0 when `deterministic`, so identical runs
    /// produce identical files.
    pub fn csv_row(&self, deterministic: bool) -> String {
        let secs = if deterministic { 0.0 } else { self.seconds };
        format!(
            "{},{},{},{},{},{},{},{secs:.3}",
            self.epoch, self.loss, self.val_acc, self.d_intra, self.d_adjacent, self.d_anomaly, self.lambda
        )
    }
}

impl TrainHistory {
    pub fn to_csv(&self, deterministic: bool) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.records {
            s.push_str(&r.csv_row(deterministic));
            s.push('\n');
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Images the trainer consumes: training images grouped by step (index 0 is
/// step 1) and an optional validation list.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train_by_step: Vec<Vec<LabeledImage>>,
    pub val: Vec<LabeledImage>,
}

impl TrainingData {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        Ok(Self {
            train_by_step: manifest.load_by_step(Split::Train)?,
            val: manifest.load_split(Split::Val)?,
        })
    }

    pub fn gallery_images(&self) -> Vec<LabeledImage> {
        self.train_by_step.iter().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where checkpoints, metrics and the resolved config go; nothing is
    /// written when `None`.
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
}

/// Classifies every validation image against a gallery of the training
/// images (no rejection threshold) and returns the fraction correct.
/// `k` is capped at the gallery size.
pub fn validate_epoch(
    params: &Parameters<f32>,
    gallery_images: &[LabeledImage],
    val_images: &[LabeledImage],
    k: usize,
    metric: crate::loss::Metric,
) -> Result<f64> {
    if val_images.is_empty() {
        return Err(Error::Domain("validation set is empty".into()));
    }
    let gallery = build_gallery(params, gallery_images, metric)?;
    let k = k.min(gallery.len());
    let embs = embed_all(params, val_images)?;
    let mut correct = 0;
    for (img, e) in val_images.iter().zip(&embs) {
        if knn_classify(&gallery, e, k, None)?.predicted == img.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / val_images.len() as f64)
}

#[derive(Default)]
struct EpochStats {
    loss: f64,
    d_p: f64,
    d_ano: f64,
    adjacent_sum: f64,
    adjacent_count: usize,
    tuples: usize,
}

struct BatchRow {
    epoch: usize,
    batch: usize,
    mean: LossBreakdown,
}

const BATCHES_HEADER: &str = "epoch,batch,loss,term_n1,term_n2,term_anomaly,d_p,d_n1,d_n2,d_ano,lambda";

impl BatchRow {
    fn csv(&self) -> String {
        let b = &self.mean;
        let d_n2 = b.d_n2.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{d_n2},{},{}",
            self.epoch, self.batch, b.total, b.term_n1, b.term_n2, b.term_anomaly, b.d_p, b.d_n1, b.d_ano, b.lambda
        )
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        total: avg(|b| b.total),
        term_n1: avg(|b| b.term_n1),
        term_n2: avg(|b| b.term_n2),
        term_anomaly: avg(|b| b.term_anomaly),
        d_p: avg(|b| b.d_p),
        d_n1: avg(|b| b.d_n1),
        d_n2: items[0].d_n2.map(|_| avg(|b| b.d_n2.unwrap_or(0.0))),
        d_ano: avg(|b| b.d_ano),
        lambda: items[0].lambda,
    }
}

struct Outputs {
    dir: PathBuf,
    metrics: File,
    batches: File,
}

impl Outputs {
    fn create(dir: &Path, config: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(CONFIG_FILE), config.to_toml()?.as_bytes())?;
        let open = |name: &str, header: &str| -> Result<File> {
            let p = dir.join(name);
            let mut f = File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{header}").map_err(|e| Error::io(&p, e))?;
            Ok(f)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open(METRICS_FILE, METRICS_HEADER)?,
            batches: open(BATCHES_FILE, BATCHES_HEADER)?,
        })
    }

    fn append(file: &mut File, path: PathBuf, lines: &[String]) -> Result<()> {
        let mut s = String::new();
        for l in lines {
            s.push_str(l);
            s.push('\n');
        }
        file.write_all(s.as_bytes()).and_then(|_| file.flush()).map_err(|e| Error::io(path, e))
    }
}

/// Loads the train and val splits from a generated dataset and trains.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest) -> Result<(Parameters<f32>, TrainHistory)> {
    let data = TrainingData::from_manifest(manifest)?;
    train_with(config, &data, &TrainOptions::default(), |_| {})
}

/// The training loop. `on_epoch` sees each record as soon as it is complete.
///
/// Gradients of a batch are computed in parallel but summed in tuple order,
/// so results do not depend on the thread count.
pub fn train_with(
    config: &TrainConfig,
    data: &TrainingData,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Parameters<f32>, TrainHistory)> {
    config.validate()?;
    if config.arch.input_size != data.train_by_step.first().and_then(|c| c.first()).map_or(0, |i| i.width) {
        return Err(Error::config(format!(
            "arch.input_size {} does not match the training images",
            config.arch.input_size
        )));
    }
    let mut params: Parameters<f32> = init_network(&config.arch, derive_seed(config.seed, &[0x1417]))?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, params.len());
    let schedule = config.lambda_schedule();
    let gallery_images = data.gallery_images();
    let mut outputs = options
        .out_dir
        .as_deref()
        .map(|d| Outputs::create(d, config))
        .transpose()?;
    let mut history = TrainHistory::default();

    for epoch in 1..=config.total_epochs {
        let started = Instant::now();
        let lambda = lambda_schedule(epoch, &schedule)?;
        let tuples = epoch_tuples(&config.sampler_config(epoch), &data.train_by_step)?;
        let mut stats = EpochStats::default();
        let mut batch_rows = Vec::new();
        let indices: Vec<usize> = (0..tuples.len()).collect();
        for (b, chunk) in indices.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<_>> = chunk
                .par_iter()
                .map(|&i| {
                    let t = tuples.get(i)?;
                    let (anchor, negs) = t.anchor_and_negative_classes();
                    loss_gradients(&params, &t, &config.loss, lambda).map(|(lb, g)| (lb, g, anchor, negs))
                })
                .collect();
            let mut grad_sum = vec![0f32; params.len()];
            let mut breakdowns = Vec::with_capacity(chunk.len());
            for r in results {
                let (lb, g, anchor, negs) = r.map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {what}")),
                    other => other,
                })?;
                for (s, v) in grad_sum.iter_mut().zip(&g) {
                    *s += v;
                }
                stats.loss += lb.total;
                stats.d_p += lb.d_p;
                stats.d_ano += lb.d_ano;
                stats.tuples += 1;
                let dists = [Some(lb.d_n1), lb.d_n2];
                for (neg, d) in negs.iter().zip(dists) {
                    if neg.abs_diff(anchor) == 1 {
                        if let Some(d) = d {
                            stats.adjacent_sum += d;
                            stats.adjacent_count += 1;
                        }
                    }
                }
                breakdowns.push(lb);
            }
            let scale = 1.0 / chunk.len() as f32;
            grad_sum.iter_mut().for_each(|g| *g *= scale);
            optimizer.step(&mut params, &grad_sum);
            if params.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {b}: parameters after update")));
            }
            batch_rows.push(BatchRow {
                epoch,
                batch: b,
                mean: mean_breakdown(&breakdowns),
            });
        }
        let val_acc = if data.val.is_empty() {
            f64::NAN
        } else {
            validate_epoch(&params, &gallery_images, &data.val, config.k, config.loss.metric)?
        };
        let n = stats.tuples as f64;
        let record = EpochRecord {
            epoch,
            loss: stats.loss / n,
            val_acc,
            d_intra: stats.d_p / n,
            d_adjacent: if stats.adjacent_count == 0 {
                f64::NAN
            } else {
                stats.adjacent_sum / stats.adjacent_count as f64
            },
            d_anomaly: stats.d_ano / n,
            lambda,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(out) = outputs.as_mut() {
            let rows: Vec<String> = batch_rows.iter().map(BatchRow::csv).collect();
            Outputs::append(&mut out.batches, out.dir.join(BATCHES_FILE), &rows)?;
            Outputs::append(
                &mut out.metrics,
                out.dir.join(METRICS_FILE),
                &[record.csv_row(options.deterministic)],
            )?;
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                save_checkpoint(&params, config, &out.dir.join(epoch_checkpoint_name(epoch)))?;
            }
        }
        on_epoch(&record);
        history.records.push(record);
    }
    if let Some(out) = &outputs {
        save_checkpoint(&params, config, &out.dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeled::Label;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            total_epochs: 2,
            anomaly_start_epoch: 1,
            learning_rate: 1e-3,
            batch_size: 4,
            k: 3,
            arch: ArchSpec {
                input_size: 16,
                conv_channels: [2, 2, 2, 2],
                embed_dim: 4,
                two_digit_guard: true,
            },
            sampler: SamplingSpec {
                n: 3,
                m: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_data() -> TrainingData {
        let img = |s: u16, j: usize| {
            let mut im = LabeledImage::filled(format!("s{s}-{j}"), Label::Step(s), 16, 16, 0.0);
            for (i, v) in im.pixels.iter_mut().enumerate() {
                *v = (((i * (s as usize + 3) + j * 7) % 17) as f32) / 17.0;
            }
            im
        };
        TrainingData {
            train_by_step: (1..=3).map(|s| (0..2).map(|j| img(s, j)).collect()).collect(),
            val: (1..=3).map(|s| img(s, 5)).collect(),
        }
    }

    #[test]
    fn config_validation_lists_every_issue() {
        let mut c = tiny_config();
        c.anomaly_start_epoch = 5;
        c.learning_rate = 0.0;
        c.batch_size = 0;
        match c.validate() {
            Err(Error::Config(list)) => assert_eq!(list.len(), 3, "{list:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let c = tiny_config();
        let back: TrainConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn smoke_run_is_deterministic() {
        let c = tiny_config();
        let d = tiny_data();
        let (p1, h1) = train_with(&c, &d, &TrainOptions::default(), |_| {}).unwrap();
        let (p2, h2) = train_with(&c, &d, &TrainOptions::default(), |_| {}).unwrap();
        assert_eq!(h1.records.len(), 2);
        assert_eq!(p1.values, p2.values);
        assert_eq!(h1.to_csv(true), h2.to_csv(true));
        assert_eq!(h1.records[0].lambda, 0.0);
        assert_eq!(h1.records[1].lambda, 1.0);
    }

    #[test]
    fn checkpoint_round_trip_in_memory() {
        let c = tiny_config();
        let p: Parameters<f32> = init_network(&c.arch, 9).unwrap();
        let bytes = checkpoint_bytes(&p, &c).unwrap();
        let (q, c2) = checkpoint_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(q, p);
        assert_eq!(c2, c);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
