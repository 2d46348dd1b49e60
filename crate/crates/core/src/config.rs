//! Run configuration: a flat `key = value` text format, two built-in
//! profiles and the ablation switches.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown keys are rejected. [`TrainConfig::to_text`] emits every
//! key in a fixed order, so a resolved config round-trips exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Architecture variants that can be switched at runtime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// I: the full model.
    #[default]
    Vanilla,
    /// II: ReLU in both column networks.
    ReluOnly,
    /// III: no attention term in the level update.
    NoAttention,
    /// IV: column networks reduced to single affine maps.
    LinearColumns,
    /// V: contrastive head reduced to a single affine map.
    LinearHead,
    /// VI: linear patch embedding instead of the convolutional tokenizer.
    LinearEmbedding,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Vanilla,
        Ablation::ReluOnly,
        Ablation::NoAttention,
        Ablation::LinearColumns,
        Ablation::LinearHead,
        Ablation::LinearEmbedding,
    ];

    pub fn roman(self) -> &'static str {
        match self {
            Ablation::Vanilla => "I",
            Ablation::ReluOnly => "II",
            Ablation::NoAttention => "III",
            Ablation::LinearColumns => "IV",
            Ablation::LinearHead => "V",
            Ablation::LinearEmbedding => "VI",
        }
    }

    fn name(self) -> &'static str {
        match self {
            Ablation::Vanilla => "vanilla",
            Ablation::ReluOnly => "relu-only",
            Ablation::NoAttention => "no-attention",
            Ablation::LinearColumns => "linear-columns",
            Ablation::LinearHead => "linear-head",
            Ablation::LinearEmbedding => "linear-embedding",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Ablation::ALL
            .into_iter()
            .find(|a| a.roman().eq_ignore_ascii_case(t) || a.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected I..VI)")))
    }
}

/// Positions a level attends to within its layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Neighborhood {
    #[default]
    Full,
    /// Square window: positions within Chebyshev distance `r`.
    Radius(usize),
}

impl fmt::Display for Neighborhood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Neighborhood::Full => f.write_str("full"),
            Neighborhood::Radius(r) => write!(f, "radius:{r}"),
        }
    }
}

impl FromStr for Neighborhood {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t == "full" {
            return Ok(Neighborhood::Full);
        }
        t.strip_prefix("radius:")
            .and_then(|r| r.parse().ok())
            .map(Neighborhood::Radius)
            .ok_or_else(|| Error::Config(format!("bad neighborhood `{s}` (expected `full` or `radius:N`)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("bad precision `{s}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetId {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
    SmallNorb,
}

impl DatasetId {
    /// `(height, width, channels)` of one image.
    pub fn image_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetId::Mnist | DatasetId::FashionMnist => (28, 28, 1),
            DatasetId::Cifar10 | DatasetId::Cifar100 | DatasetId::SmallNorb => (32, 32, 3),
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetId::Mnist | DatasetId::FashionMnist | DatasetId::Cifar10 => 10,
            DatasetId::Cifar100 => 100,
            DatasetId::SmallNorb => 5,
        }
    }

    /// Conventional per-channel normalisation statistics.
    pub fn default_stats(self) -> (Vec<f64>, Vec<f64>) {
        match self {
            DatasetId::Mnist => (vec![0.1307], vec![0.3081]),
            DatasetId::FashionMnist => (vec![0.2860], vec![0.3530]),
            DatasetId::Cifar10 => (vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616]),
            DatasetId::Cifar100 => (vec![0.5071, 0.4865, 0.4409], vec![0.2673, 0.2564, 0.2762]),
            DatasetId::SmallNorb => (vec![0.5; 3], vec![0.25; 3]),
        }
    }

    /// Subdirectory of the data root holding this dataset.
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
            DatasetId::Cifar10 => "cifar-10-batches-bin",
            DatasetId::Cifar100 => "cifar-100-binary",
            DatasetId::SmallNorb => "smallnorb",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::SmallNorb => "smallnorb",
        })
    }
}

impl FromStr for DatasetId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fashion-mnist" | "fashion_mnist" | "fashionmnist" => Ok(DatasetId::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetId::Cifar10),
            "cifar100" | "cifar-100" => Ok(DatasetId::Cifar100),
            "smallnorb" => Ok(DatasetId::SmallNorb),
            _ => Err(Error::Config(format!("unknown dataset `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected desk or paper)"))),
        }
    }
}

/// Architecture hyper-parameters, derived from a [`TrainConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub d: usize,
    /// Index of the top level `K`; columns hold `K + 1` levels.
    pub levels: usize,
    /// Propagation steps `T`.
    pub steps: usize,
    pub f1: usize,
    pub classes: usize,
    pub dropout: f64,
    pub beta: f64,
    pub temperature: f64,
    pub neighborhood: Neighborhood,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.in_h / 4, self.in_w / 4)
    }

    pub fn positions(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        if !self.in_h.is_multiple_of(4) || !self.in_w.is_multiple_of(4) || self.in_h == 0 || self.in_w == 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 4",
                self.in_h, self.in_w
            )));
        }
        if self.in_c != 1 && self.in_c != 3 {
            return Err(Error::Config(format!("{} input channels (expected 1 or 3)", self.in_c)));
        }
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("d = {} must be even and at least 2", self.d)));
        }
        if self.levels < 1 || self.steps < 1 {
            return Err(Error::Config("levels and steps must be at least 1".into()));
        }
        if self.f1 == 0 || self.classes == 0 {
            return Err(Error::Config("f1 and f2 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.beta > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("beta and temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_train: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub batch_size: usize,
    pub d: usize,
    pub levels: usize,
    pub steps: usize,
    pub f1: usize,
    pub f2: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: crate::numerics::OptimizerKind,
    pub beta: f64,
    pub temperature: f64,
    pub neighborhood: Neighborhood,
    pub ablation: Ablation,
    pub seed: u64,
    pub precision: Precision,
    pub dataset: DatasetId,
    /// Data root; empty means the environment variable or `./data`.
    pub data_dir: PathBuf,
    /// Training subset: a fraction when `<= 1`, a sample count otherwise.
    pub subset: f64,
    /// Test subset, same convention.
    pub test_subset: f64,
    pub augment_ops: usize,
    pub augment_magnitude: f64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

/// Keys accepted by [`TrainConfig::set`], in canonical order.
pub const KEYS: &[&str] = &[
    "epochs_pretrain",
    "epochs_train",
    "lr_min",
    "lr_max",
    "batch_size",
    "d",
    "levels",
    "steps",
    "f1",
    "f2",
    "dropout",
    "weight_decay",
    "momentum",
    "optimizer",
    "beta",
    "temperature",
    "neighborhood",
    "ablation",
    "seed",
    "precision",
    "dataset",
    "data_dir",
    "subset",
    "test_subset",
    "augment_ops",
    "augment_magnitude",
    "workers",
    "norm_mean",
    "norm_std",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        let (mean, std) = DatasetId::Mnist.default_stats();
        let desk = Self {
            epochs_pretrain: 20,
            epochs_train: 10,
            lr_min: 0.002,
            lr_max: 0.05,
            batch_size: 128,
            d: 64,
            levels: 3,
            steps: 6,
            f1: 256,
            f2: 10,
            dropout: 0.3,
            weight_decay: 5e-4,
            momentum: 0.9,
            optimizer: crate::numerics::OptimizerKind::Sgd,
            beta: 8.0,
            temperature: 1.0,
            neighborhood: Neighborhood::Full,
            ablation: Ablation::Vanilla,
            seed: 0,
            precision: Precision::F32,
            dataset: DatasetId::Mnist,
            data_dir: PathBuf::new(),
            subset: 10_000.0,
            test_subset: 1.0,
            augment_ops: 2,
            augment_magnitude: 10.0,
            workers: 0,
            norm_mean: mean,
            norm_std: std,
        };
        match p {
            Profile::Desk => desk,
            Profile::Paper => Self {
                epochs_pretrain: 300,
                epochs_train: 300,
                batch_size: 1024,
                d: 128,
                f1: 512,
                subset: 1.0,
                ..desk
            },
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        match k {
            "epochs_pretrain" => self.epochs_pretrain = parse(k, value)?,
            "epochs_train" => self.epochs_train = parse(k, value)?,
            "lr_min" => self.lr_min = parse(k, value)?,
            "lr_max" => self.lr_max = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "d" => self.d = parse(k, value)?,
            "levels" => self.levels = parse(k, value)?,
            "steps" => self.steps = parse(k, value)?,
            "f1" => self.f1 = parse(k, value)?,
            "f2" => self.f2 = parse(k, value)?,
            "dropout" => self.dropout = parse(k, value)?,
            "weight_decay" => self.weight_decay = parse(k, value)?,
            "momentum" => self.momentum = parse(k, value)?,
            "optimizer" => self.optimizer = value.trim().parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "beta" => self.beta = parse(k, value)?,
            "temperature" => self.temperature = parse(k, value)?,
            "neighborhood" => self.neighborhood = value.parse()?,
            "ablation" => self.ablation = value.parse()?,
            "seed" => self.seed = parse(k, value)?,
            "precision" => self.precision = value.parse()?,
            "dataset" => {
                let id: DatasetId = value.parse()?;
                if id != self.dataset {
                    let (m, s) = id.default_stats();
                    self.norm_mean = m;
                    self.norm_std = s;
                    self.f2 = id.classes();
                }
                self.dataset = id;
            }
            "data_dir" => self.data_dir = PathBuf::from(value.trim()),
            "subset" => self.subset = parse(k, value)?,
            "test_subset" => self.test_subset = parse(k, value)?,
            "augment_ops" => self.augment_ops = parse(k, value)?,
            "augment_magnitude" => self.augment_magnitude = parse(k, value)?,
            "workers" => self.workers = parse(k, value)?,
            "norm_mean" => self.norm_mean = parse_list(k, value)?,
            "norm_std" => self.norm_std = parse_list(k, value)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected `key = value`", origin.display(), n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(base: Profile, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::profile(base);
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Canonical text form; feeding it back through [`Self::apply_text`]
    /// reproduces `self`.
    pub fn to_text(&self) -> String {
        let value = |k: &str| -> String {
            match k {
                "epochs_pretrain" => self.epochs_pretrain.to_string(),
                "epochs_train" => self.epochs_train.to_string(),
                "lr_min" => self.lr_min.to_string(),
                "lr_max" => self.lr_max.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "d" => self.d.to_string(),
                "levels" => self.levels.to_string(),
                "steps" => self.steps.to_string(),
                "f1" => self.f1.to_string(),
                "f2" => self.f2.to_string(),
                "dropout" => self.dropout.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "momentum" => self.momentum.to_string(),
                "optimizer" => self.optimizer.to_string(),
                "beta" => self.beta.to_string(),
                "temperature" => self.temperature.to_string(),
                "neighborhood" => self.neighborhood.to_string(),
                "ablation" => self.ablation.to_string(),
                "seed" => self.seed.to_string(),
                "precision" => self.precision.to_string(),
                "dataset" => self.dataset.to_string(),
                "data_dir" => self.data_dir.display().to_string(),
                "subset" => self.subset.to_string(),
                "test_subset" => self.test_subset.to_string(),
                "augment_ops" => self.augment_ops.to_string(),
                "augment_magnitude" => self.augment_magnitude.to_string(),
                "workers" => self.workers.to_string(),
                "norm_mean" => join(&self.norm_mean),
                "norm_std" => join(&self.norm_std),
                _ => unreachable!("key list and serialiser disagree"),
            }
        };
        KEYS.iter().map(|k| format!("{k} = {}\n", value(k))).collect()
    }

    pub fn model(&self) -> ModelConfig {
        let (in_h, in_w, in_c) = self.dataset.image_shape();
        ModelConfig {
            in_h,
            in_w,
            in_c,
            d: self.d,
            levels: self.levels,
            steps: self.steps,
            f1: self.f1,
            classes: self.f2,
            dropout: self.dropout,
            beta: self.beta,
            temperature: self.temperature,
            neighborhood: self.neighborhood,
            ablation: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.batch_size < 4 {
            return Err(Error::Config(format!(
                "batch_size {} is below the contrastive minimum of 4",
                self.batch_size
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr_max, got [{}, {}]", self.lr_min, self.lr_max)));
        }
        if self.f2 != self.dataset.classes() {
            return Err(Error::Config(format!(
                "f2 = {} but {} has {} classes",
                self.f2,
                self.dataset,
                self.dataset.classes()
            )));
        }
        let c = self.dataset.image_shape().2;
        if self.norm_mean.len() != c || self.norm_std.len() != c {
            return Err(Error::Config(format!("normalisation stats need {c} channel values")));
        }
        if let Some(s) = self.norm_std.iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::Config(format!("normalisation std {s} must be positive")));
        }
        if !(self.subset > 0.0) || !(self.test_subset > 0.0) {
            return Err(Error::Config("subsets must be positive".into()));
        }
        if !(0.0..=30.0).contains(&self.augment_magnitude) {
            return Err(Error::Config("augment_magnitude outside [0, 30]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::profile(Profile::Paper);
        c.set("neighborhood", "radius:2").unwrap();
        c.set("ablation", "IV").unwrap();
        c.set("norm_mean", "0.5").unwrap();
        let mut d = TrainConfig::profile(Profile::Desk);
        d.apply_text(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut c = TrainConfig::default();
        let err = c.apply_text("batch_size = 64\nbatchsize = 3\n", Path::new("c.cfg")).unwrap_err();
        assert!(err.to_string().contains("c.cfg:2"), "{err}");
        assert_eq!(c.batch_size, 64);
    }

    #[test]
    fn profiles() {
        let p = TrainConfig::profile(Profile::Paper);
        assert_eq!((p.batch_size, p.d, p.epochs_pretrain, p.f1), (1024, 128, 300, 512));
        let d = TrainConfig::profile(Profile::Desk);
        assert_eq!((d.d, d.levels, d.steps, d.batch_size, d.f1), (64, 3, 6, 128, 256));
        assert_eq!(d.steps, 2 * d.levels);
        d.validate().unwrap();
        p.validate().unwrap();
    }

    #[test]
    fn switching_dataset_updates_stats_and_classes() {
        let mut c = TrainConfig::default();
        c.set("dataset", "cifar10").unwrap();
        assert_eq!(c.norm_mean.len(), 3);
        c.validate().unwrap();
        assert_eq!(c.model().grid(), (8, 8));
        c.set("norm_std", "0.2,0,0.2").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn enums_parse() {
        assert_eq!("VI".parse::<Ablation>().unwrap(), Ablation::LinearEmbedding);
        assert_eq!("no-attention".parse::<Ablation>().unwrap(), Ablation::NoAttention);
        assert!("VII".parse::<Ablation>().is_err());
        assert_eq!("radius:1".parse::<Neighborhood>().unwrap(), Neighborhood::Radius(1));
        assert!("radius:x".parse::<Neighborhood>().is_err());
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut m = TrainConfig::default().model();
        m.in_h = 30;
        assert!(m.validate().is_err());
    }
}
