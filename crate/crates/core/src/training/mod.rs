//! Two-phase training: contrastive pre-training of the backbone, then a
//! classifier head on the frozen backbone.
//!
//! Randomness is keyed per batch. For epoch `e` and batch `b`:
//!
//! * the sample order of epoch `e` comes from `Shuffle (e, 0)`;
//! * augmentation draws come from `Augment (e, b)`;
//! * the initial lattice state comes from `State (e, b)`;
//! * the dropout seed is the first word of `Dropout (e, b)`.
//!
//! The classifier phase uses epochs offset by [`CLASSIFIER_EPOCH_BASE`] and
//! evaluation uses [`EVAL_EPOCH`], so no phase shares a draw with another.
//! Incomplete final batches are dropped during training.

pub mod augment;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::config::TrainConfig;
use crate::data::{shuffle, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::heads::{cross_entropy, supervised_contrastive_loss};
use crate::lattice::{LatticeState, RunMode};
use crate::model::Agglomerator;
use crate::numerics::{checkpoint, Graph, Optimizer};
use crate::rng::{RngStreams, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{rand_augment, AugmentOp};

/// Epoch key offset for classifier-phase streams.
pub const CLASSIFIER_EPOCH_BASE: u64 = 1 << 32;
/// Epoch key of evaluation streams.
pub const EVAL_EPOCH: u64 = u64::MAX;

/// Triangular cyclic learning rate: rises linearly from `lr_min` to
/// `lr_max` over `half_cycle` steps, falls back over the next `half_cycle`
/// and repeats.
pub fn cyclic_lr(step: usize, half_cycle: usize, lr_min: f64, lr_max: f64) -> f64 {
    let half = half_cycle.max(1);
    let pos = step % (2 * half);
    let frac = if pos <= half { pos } else { 2 * half - pos } as f64 / half as f64;
    lr_min + (lr_max - lr_min) * frac
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Train,
    Eval,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Train => "train",
            Phase::Eval => "eval",
        })
    }
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean loss over the epoch's batches.
    pub loss: f64,
    /// Learning rate of the epoch's last step; absent for evaluation.
    pub lr: Option<f64>,
    pub accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,phase,loss,lr,accuracy";

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        write!(f, "{},{},{},{},{}", self.epoch, self.phase, self.loss, opt(self.lr), opt(self.accuracy))
    }
}

/// Metrics sink: keeps every row and appends it to a CSV file when one is
/// configured.
#[derive(Debug, Default)]
pub struct Metrics {
    path: Option<PathBuf>,
    pub rows: Vec<MetricRow>,
}

impl Metrics {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Creates (truncating) `path` and writes the header.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            rows: Vec::new(),
        })
    }

    /// Appends to an existing file without rewriting the header.
    pub fn append_to(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::to_file(path);
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = fs::OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{row}").map_err(|e| Error::io(p, e))?;
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Output locations and logging for a training phase.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint written after every completed epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Print a progress line to stderr every this many batches (0 = never).
    pub log_every: usize,
}

/// Saves through a sibling temporary directory so that an interrupted
/// write never replaces a good checkpoint.
pub fn save_checkpoint<T: Scalar>(model: &Agglomerator<T>, dir: &Path) -> Result<String> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let digest = checkpoint::save(&model.store, &tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(digest)
}

/// Sample indices of every full batch of an epoch.
pub fn epoch_batches(n: usize, batch: usize, streams: &RngStreams, epoch: u64) -> Vec<Vec<usize>> {
    let order = shuffle(n, &mut streams.substream(Stream::Shuffle, epoch, 0));
    order.chunks_exact(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Inputs of one contrastive batch.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T> {
    /// `[2B, H, W, C]`, laid out `[a_0 .. a_{B-1}, b_0 .. b_{B-1}]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub init: LatticeState<T>,
    pub mode: RunMode,
    /// Ops applied to each view, in view order.
    pub ops: Vec<Vec<AugmentOp>>,
}

fn augmented_views<T: Scalar>(
    data: &Dataset,
    views: &[usize],
    cfg: &TrainConfig,
    norm: &Normalization,
    streams: &RngStreams,
    key: (u64, u64),
    augment: bool,
) -> Result<(Tensor<T>, Vec<Vec<AugmentOp>>)> {
    let (h, w, c) = data.shape;
    let mut rng = streams.substream(Stream::Augment, key.0, key.1);
    let mut pixels = Vec::with_capacity(views.len() * data.image_len());
    let mut ops = Vec::with_capacity(views.len());
    for &i in views {
        let mut img = data.image(i).to_vec();
        if augment {
            ops.push(rand_augment(&mut img, data.shape, cfg.augment_ops, cfg.augment_magnitude, &mut rng));
        }
        pixels.extend(img);
    }
    norm.apply(&mut pixels);
    let t = Tensor::from_vec(&[views.len(), h, w, c], pixels.into_iter().map(|v| T::from_f64_lossy(f64::from(v))).collect())?;
    Ok((t, ops))
}

fn batch_mode(streams: &RngStreams, key: (u64, u64)) -> RunMode {
    RunMode {
        train: true,
        dropout_seed: streams.substream(Stream::Dropout, key.0, key.1).next_u64(),
    }
}

/// Assembles contrastive batch `index` of `epoch` from the sample indices
/// in `batch`.
pub fn contrastive_batch<T: Scalar>(
    model: &Agglomerator<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    norm: &Normalization,
    batch: &[usize],
    epoch: u64,
    index: u64,
) -> Result<ContrastiveBatch<T>> {
    let streams = RngStreams::new(cfg.seed);
    let views: Vec<usize> = batch.iter().chain(batch).copied().collect();
    let (images, ops) = augmented_views(data, &views, cfg, norm, &streams, (epoch, index), true)?;
    let init = model.init_state(views.len(), &mut streams.substream(Stream::State, epoch, index));
    Ok(ContrastiveBatch {
        images,
        labels: views.iter().map(|&i| data.labels[i]).collect(),
        init,
        mode: batch_mode(&streams, (epoch, index)),
        ops,
    })
}

/// Records the contrastive loss of a batch on `g`.
pub fn contrastive_loss<T: Scalar>(
    model: &Agglomerator<T>,
    cfg: &TrainConfig,
    g: &mut Graph<T>,
    batch: &ContrastiveBatch<T>,
) -> Result<crate::numerics::Var> {
    let x = g.constant(batch.images.clone());
    let f = model.features(g, x, &batch.init, batch.mode)?;
    supervised_contrastive_loss(g, f, &batch.labels, cfg.temperature)
}

fn optimizer<T: Scalar>(cfg: &TrainConfig) -> Optimizer<T> {
    Optimizer::new(cfg.optimizer, cfg.momentum, cfg.weight_decay)
}

fn check_batch_count(n: usize, cfg: &TrainConfig, phase: Phase) -> Result<usize> {
    let batches = n / cfg.batch_size.max(1);
    if batches == 0 {
        return Err(Error::Config(format!(
            "{phase}: {n} samples do not fill one batch of {}",
            cfg.batch_size
        )));
    }
    Ok(batches)
}

/// Contrastive pre-training of the backbone. Returns the per-epoch mean
/// losses. A non-finite loss aborts; the checkpoint of the last completed
/// epoch is left in place.
pub fn pretrain<T: Scalar>(
    model: &mut Agglomerator<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    metrics: &mut Metrics,
    opts: &RunOptions,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let norm = Normalization::from_config(cfg)?;
    let streams = RngStreams::new(cfg.seed);
    let per_epoch = check_batch_count(data.len(), cfg, Phase::Pretrain)?;
    model.select_backbone();
    let mut opt = optimizer::<T>(cfg);
    let mut losses = Vec::with_capacity(cfg.epochs_pretrain);
    let mut step = 0;
    for epoch in 0..cfg.epochs_pretrain {
        let mut total = 0.0;
        let mut lr = cfg.lr_min;
        for (b, idx) in epoch_batches(data.len(), cfg.batch_size, &streams, epoch as u64).iter().enumerate() {
            let batch = contrastive_batch(model, cfg, data, &norm, idx, epoch as u64, b as u64)?;
            let mut g = Graph::new();
            let loss = contrastive_loss(model, cfg, &mut g, &batch)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            g.backward(loss)?.accumulate_into(&mut model.store);
            lr = cyclic_lr(step, per_epoch, cfg.lr_min, cfg.lr_max);
            opt.step(&mut model.store, lr)?;
            step += 1;
            total += value;
            if opts.log_every > 0 && (b + 1) % opts.log_every == 0 {
                eprintln!("pretrain epoch {epoch} batch {}/{per_epoch} loss {value:.5} lr {lr:.5}", b + 1);
            }
        }
        let mean = total / per_epoch as f64;
        losses.push(mean);
        metrics.push(MetricRow {
            epoch,
            phase: Phase::Pretrain,
            loss: mean,
            lr: Some(lr),
            accuracy: None,
        })?;
        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(model, dir)?;
        }
    }
    Ok(losses)
}

/// Trains `H2` on single augmented views with the backbone frozen and run
/// in evaluation mode. Returns the per-epoch mean losses.
pub fn train_classifier<T: Scalar>(
    model: &mut Agglomerator<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    metrics: &mut Metrics,
    opts: &RunOptions,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let norm = Normalization::from_config(cfg)?;
    let streams = RngStreams::new(cfg.seed);
    let per_epoch = check_batch_count(data.len(), cfg, Phase::Train)?;
    model.select_classifier();
    let mut opt = optimizer::<T>(cfg);
    let mut losses = Vec::with_capacity(cfg.epochs_train);
    let mut step = 0;
    for epoch in 0..cfg.epochs_train {
        let key_epoch = CLASSIFIER_EPOCH_BASE + epoch as u64;
        let mut total = 0.0;
        let mut lr = cfg.lr_min;
        for (b, idx) in epoch_batches(data.len(), cfg.batch_size, &streams, key_epoch).iter().enumerate() {
            let key = (key_epoch, b as u64);
            let (images, _) = augmented_views::<T>(data, idx, cfg, &norm, &streams, key, true)?;
            let init = model.init_state(idx.len(), &mut streams.substream(Stream::State, key.0, key.1));
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(images);
            let logits = model.logits(&mut g, x, &init, RunMode::EVAL)?;
            let loss = cross_entropy(&mut g, logits, &labels)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            g.backward(loss)?.accumulate_into(&mut model.store);
            lr = cyclic_lr(step, per_epoch, cfg.lr_min, cfg.lr_max);
            opt.step(&mut model.store, lr)?;
            step += 1;
            total += value;
            if opts.log_every > 0 && (b + 1) % opts.log_every == 0 {
                eprintln!("train epoch {epoch} batch {}/{per_epoch} loss {value:.5} lr {lr:.5}", b + 1);
            }
        }
        let mean = total / per_epoch as f64;
        losses.push(mean);
        metrics.push(MetricRow {
            epoch,
            phase: Phase::Train,
            loss: mean,
            lr: Some(lr),
            accuracy: None,
        })?;
        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(model, dir)?;
        }
    }
    Ok(losses)
}

/// Top-1 results over a dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Mean classification loss.
    pub loss: f64,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    /// Top-1 error in percent.
    pub fn error_percent(&self) -> f64 {
        100.0 * (1.0 - self.accuracy)
    }
}

/// Index of the largest logit per row; the first wins ties.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Accuracy and per-class accuracy of `predictions`.
pub fn score(predictions: &[usize], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        seen[l] += 1;
        hit[l] += usize::from(p == l);
    }
    let total: usize = hit.iter().sum();
    let per_class = hit
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { f64::NAN } else { h as f64 / s as f64 })
        .collect();
    (total as f64 / labels.len().max(1) as f64, per_class)
}

/// Evaluates without augmentation or dropout. Every sample is scored; the
/// last batch may be short. Model weights and training streams are not
/// touched.
pub fn evaluate<T: Scalar>(model: &Agglomerator<T>, cfg: &TrainConfig, data: &Dataset) -> Result<Evaluation> {
    let norm = Normalization::from_config(cfg)?;
    let streams = RngStreams::new(cfg.seed);
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    let all: Vec<usize> = (0..data.len()).collect();
    for (b, idx) in all.chunks(cfg.batch_size.max(1)).enumerate() {
        let images = data.batch::<T>(idx, Some(&norm))?;
        let init = model.init_state(idx.len(), &mut streams.substream(Stream::State, EVAL_EPOCH, b as u64));
        let (_, logits) = model.predict(&images, &init)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        loss += crate::heads::cross_entropy_value(&logits, &labels)?.as_f64() * idx.len() as f64;
        predictions.extend(argmax_rows(&logits));
    }
    let (accuracy, per_class) = score(&predictions, &data.labels, data.classes);
    Ok(Evaluation {
        accuracy,
        per_class,
        loss: loss / data.len().max(1) as f64,
        predictions,
    })
}

/// Appends an evaluation row.
pub fn record_evaluation(metrics: &mut Metrics, epoch: usize, eval: &Evaluation) -> Result<()> {
    metrics.push(MetricRow {
        epoch,
        phase: Phase::Eval,
        loss: eval.loss,
        lr: None,
        accuracy: Some(eval.accuracy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_lr_triangle() {
        let (lo, hi) = (0.002, 0.05);
        assert_eq!(cyclic_lr(0, 10, lo, hi), lo);
        assert!((cyclic_lr(10, 10, lo, hi) - hi).abs() < 1e-15);
        assert!((cyclic_lr(20, 10, lo, hi) - lo).abs() < 1e-15);
        assert!((cyclic_lr(5, 10, lo, hi) - 0.026).abs() < 1e-15);
        assert!((cyclic_lr(15, 10, lo, hi) - 0.026).abs() < 1e-15);
        assert!((cyclic_lr(35, 10, lo, hi) - 0.026).abs() < 1e-15);
        assert_eq!(cyclic_lr(3, 1, lo, hi), hi);
    }

    #[test]
    fn scoring() {
        let logits = Tensor::from_vec(&[3, 3], vec![0.0, 2.0, 1.0, 5.0, 5.0, 0.0, 0.0, 0.0, 1.0f64]).unwrap();
        let pred = argmax_rows(&logits);
        assert_eq!(pred, vec![1, 0, 2]);
        let (acc, per) = score(&pred, &[1, 0, 2], 3);
        assert_eq!(acc, 1.0);
        assert_eq!(per, vec![1.0, 1.0, 1.0]);
        let (acc, _) = score(&pred, &[0, 0, 0], 3);
        assert!((acc - 1.0 / 3.0).abs() < 1e-15);
        let e = Evaluation {
            accuracy: 0.997,
            per_class: vec![],
            loss: 0.0,
            predictions: vec![],
        };
        assert!((e.error_percent() - 0.3).abs() < 1e-9);
    }

    #[test]
    fn metric_rows_format() {
        let r = MetricRow {
            epoch: 3,
            phase: Phase::Pretrain,
            loss: 1.5,
            lr: Some(0.05),
            accuracy: None,
        };
        assert_eq!(r.to_string(), "3,pretrain,1.5,0.05,");
        let e = MetricRow {
            epoch: 0,
            phase: Phase::Eval,
            loss: 0.25,
            lr: None,
            accuracy: Some(0.9),
        };
        assert_eq!(e.to_string(), "0,eval,0.25,,0.9");
    }

    #[test]
    fn batches_drop_the_remainder() {
        let b = epoch_batches(10, 4, &RngStreams::new(1), 0);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
        assert_eq!(b, epoch_batches(10, 4, &RngStreams::new(1), 0));
        assert_ne!(b, epoch_batches(10, 4, &RngStreams::new(1), 1));
    }
}
