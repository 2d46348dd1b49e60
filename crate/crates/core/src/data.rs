//! Dataset loading, normalisation, subsets and shuffling.
//!
//! Images are held as `f32` in `[0, 1]`, laid out `[N, H, W, C]` with
//! channels interleaved. CIFAR records store R, G and B as separate
//! 1024-byte planes; they are interleaved on load. Normalisation is applied
//! when a batch is assembled so that augmentation sees raw pixel values.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{DatasetId, TrainConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds one sub-directory
/// per dataset.
pub const DATA_ENV: &str = "AGGLOMERATOR_DATA";

const IDX_IMAGES: u32 = 2051;
const IDX_LABELS: u32 = 2049;
const CIFAR_PIXELS: usize = 32 * 32 * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Contents of an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Idx {
    Images { count: usize, rows: usize, cols: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn new(mean: &[f64], std: &[f64]) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Config(format!(
                "normalisation needs equal, non-empty mean and std lists (got {} and {})",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("normalisation std {s} must be positive")));
        }
        Ok(Self {
            mean: mean.iter().map(|&v| v as f32).collect(),
            std: std.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Self::new(&cfg.norm_mean, &cfg.norm_std)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalises channel-interleaved pixels in place.
    pub fn apply(&self, pixels: &mut [f32]) {
        let c = self.channels();
        for px in pixels.chunks_mut(c) {
            for ((v, m), s) in px.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn invert(&self, pixels: &mut [f32]) {
        let c = self.channels();
        for px in pixels.chunks_mut(c) {
            for ((v, m), s) in px.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: DatasetId,
    pub split: Split,
    /// `[N, H, W, C]`, values in `[0, 1]` unless normalised.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// `(H, W, C)`.
    pub shape: (usize, usize, usize),
    pub classes: usize,
    /// Set once [`normalize`] has been applied.
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        let (h, w, c) = self.shape;
        h * w * c
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Copy holding the listed samples in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            id: self.id,
            split: self.split,
            images: Vec::new(),
            labels: Vec::new(),
            shape: self.shape,
            classes: self.classes,
            normalization: self.normalization.clone(),
        }
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// `[B, H, W, C]` tensor of the listed samples, optionally normalised.
    pub fn batch<T: Scalar>(&self, indices: &[usize], norm: Option<&Normalization>) -> Result<Tensor<T>> {
        let (h, w, c) = self.shape;
        let mut px = self.select(indices).images;
        if let Some(n) = norm {
            if n.channels() != c {
                return Err(Error::Config(format!("{} normalisation channels for {c}-channel images", n.channels())));
            }
            n.apply(&mut px);
        }
        Tensor::from_vec(&[indices.len(), h, w, c], px.into_iter().map(|v| T::from_f64_lossy(f64::from(v))).collect())
    }

    /// Per-channel mean over every pixel.
    pub fn channel_mean(&self) -> Vec<f64> {
        let c = self.shape.2;
        let mut sum = vec![0.0; c];
        for px in self.images.chunks(c) {
            sum.iter_mut().zip(px).for_each(|(s, &v)| *s += f64::from(v));
        }
        let n = (self.images.len() / c.max(1)).max(1) as f64;
        sum.into_iter().map(|s| s / n).collect()
    }

    fn check(self) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {} classes", self.classes)));
        }
        debug_assert_eq!(self.images.len(), self.len() * self.image_len());
        Ok(self)
    }
}

/// Returns a normalised copy.
pub fn normalize(dataset: &Dataset, norm: &Normalization) -> Result<Dataset> {
    if dataset.normalization.is_some() {
        return Err(Error::InvalidArgument("dataset is already normalised".into()));
    }
    if norm.channels() != dataset.shape.2 {
        return Err(Error::Config(format!(
            "{} normalisation channels for {}-channel images",
            norm.channels(),
            dataset.shape.2
        )));
    }
    let mut out = dataset.clone();
    norm.apply(&mut out.images);
    out.normalization = Some(norm.clone());
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(dataset: &Dataset) -> Result<Dataset> {
    let norm = dataset
        .normalization
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dataset is not normalised".into()))?;
    let mut out = dataset.clone();
    norm.invert(&mut out.images);
    out.normalization = None;
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn load_idx(path: &Path) -> Result<Idx> {
    parse_idx(&read_file(path)?, path)
}

/// Parses an IDX container; `path` is only used in errors.
pub fn parse_idx(bytes: &[u8], path: &Path) -> Result<Idx> {
    let word = |i: usize| -> Result<usize> {
        let b = bytes
            .get(4 * i..4 * i + 4)
            .ok_or_else(|| parse_err(path, bytes.len(), format!("header truncated, expected 4 bytes at offset {}", 4 * i)))?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    let magic = word(0)? as u32;
    let (dims, header) = match magic {
        IDX_IMAGES => (vec![word(1)?, word(2)?, word(3)?], 16),
        IDX_LABELS => (vec![word(1)?], 8),
        m => return Err(parse_err(path, 0, format!("bad magic {m} (expected {IDX_IMAGES} or {IDX_LABELS})"))),
    };
    let expected = dims.iter().product::<usize>();
    let body = &bytes[header..];
    if body.len() != expected {
        let what = if body.len() < expected { "truncated" } else { "trailing bytes" };
        return Err(parse_err(
            path,
            bytes.len().min(header + expected),
            format!("{what}: header promises {expected} data bytes, found {}", body.len()),
        ));
    }
    Ok(match magic {
        IDX_IMAGES => Idx::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: body.to_vec(),
        },
        _ => Idx::Labels(body.to_vec()),
    })
}

fn decode(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| f32::from(p) / 255.0).collect()
}

/// MNIST or Fashion-MNIST from the four standard IDX files in `dir`.
pub fn load_mnist_family(id: DatasetId, dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let ipath = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lpath = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let Idx::Images { count, rows, cols, pixels } = load_idx(&ipath)? else {
        return Err(parse_err(&ipath, 0, "expected an image file"));
    };
    let Idx::Labels(labels) = load_idx(&lpath)? else {
        return Err(parse_err(&lpath, 0, "expected a label file"));
    };
    if labels.len() != count {
        return Err(parse_err(&lpath, 4, format!("{} labels for {count} images", labels.len())));
    }
    Dataset {
        id,
        split,
        images: decode(&pixels),
        labels: labels.into_iter().map(usize::from).collect(),
        shape: (rows, cols, 1),
        classes: id.classes(),
        normalization: None,
    }
    .check()
}

/// Decodes CIFAR binary records of `label_bytes` label bytes followed by
/// 3072 plane-ordered pixels, keeping label byte `label_at`.
fn parse_cifar(bytes: &[u8], path: &Path, label_bytes: usize, label_at: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let record = label_bytes + CIFAR_PIXELS;
    if !bytes.len().is_multiple_of(record) {
        let whole = bytes.len() / record * record;
        return Err(parse_err(
            path,
            whole,
            format!("size {} is not a multiple of the {record}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record) {
        labels.push(usize::from(rec[label_at]));
        let planes = &rec[label_bytes..];
        for p in 0..1024 {
            for c in 0..3 {
                images.push(f32::from(planes[c * 1024 + p]) / 255.0);
            }
        }
    }
    Ok((images, labels))
}

fn cifar(id: DatasetId, split: Split, files: &[PathBuf], label_bytes: usize, label_at: usize) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (i, l) = parse_cifar(&read_file(f)?, f, label_bytes, label_at)?;
        images.extend(i);
        labels.extend(l);
    }
    Dataset {
        id,
        split,
        images,
        labels,
        shape: (32, 32, 3),
        classes: id.classes(),
        normalization: None,
    }
    .check()
}

/// CIFAR-10 from `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    cifar(DatasetId::Cifar10, split, &files, 1, 0)
}

/// CIFAR-100 (fine labels) from `train.bin` / `test.bin`.
pub fn load_cifar100(dir: &Path, split: Split) -> Result<Dataset> {
    cifar(DatasetId::Cifar100, split, &[dir.join(format!("{split}.bin"))], 2, 1)
}

/// Not implemented. The intended pipeline resizes the 96x96 stereo pairs
/// to 32x32.
pub fn load_small_norb(_dir: &Path, _split: Split) -> Result<Dataset> {
    Err(Error::Unsupported(
        "SmallNORB loading is not implemented (images would be resized to 32x32)".into(),
    ))
}

/// Directory of a dataset: `data_dir` when set, else `$AGGLOMERATOR_DATA/<name>`,
/// else `data/<name>`.
pub fn dataset_dir(cfg: &TrainConfig) -> PathBuf {
    if !cfg.data_dir.as_os_str().is_empty() {
        return cfg.data_dir.clone();
    }
    let root = std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
    root.join(cfg.dataset.dir_name())
}

pub fn load(id: DatasetId, dir: &Path, split: Split) -> Result<Dataset> {
    match id {
        DatasetId::Mnist | DatasetId::FashionMnist => load_mnist_family(id, dir, split),
        DatasetId::Cifar10 => load_cifar10(dir, split),
        DatasetId::Cifar100 => load_cifar100(dir, split),
        DatasetId::SmallNorb => load_small_norb(dir, split),
    }
}

/// Number of samples meant by `amount`: a fraction of `n` when `<= 1`
/// (rounded up), otherwise a count. Capped at `n`.
pub fn subset_size(n: usize, amount: f64) -> Result<usize> {
    if !(amount > 0.0) || !amount.is_finite() {
        return Err(Error::Config(format!("subset {amount} must be positive")));
    }
    let k = if amount <= 1.0 {
        (amount * n as f64).ceil() as usize
    } else {
        amount.round() as usize
    };
    Ok(k.min(n))
}

/// Class-balanced sample of `subset_size(labels.len(), amount)` indices,
/// returned in ascending order. Per-class quotas follow the largest
/// remainder method, so each class is within one of its proportional share.
pub fn stratified_subset<R: Rng + ?Sized>(labels: &[usize], classes: usize, amount: f64, rng: &mut R) -> Result<Vec<usize>> {
    let n = labels.len();
    let k = subset_size(n, amount)?;
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} out of range for {classes} classes")))?
            .push(i);
    }
    let exact: Vec<f64> = members.iter().map(|m| (k * m.len()) as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = k - quota.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        quota[c] += 1;
    }
    let mut picked = Vec::with_capacity(k);
    for (m, q) in members.iter_mut().zip(quota) {
        m.shuffle(rng);
        picked.extend_from_slice(&m[..q]);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Uniform random permutation of `0..n`.
pub fn shuffle<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
