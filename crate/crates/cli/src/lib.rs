//! Command-line driver.
//!
//! ```text
//! agglomerator <command> [--config FILE] [--override KEY=VALUE]... [--seed N]
//!              [--profile desk|paper] [--out DIR] [--checkpoint DIR]
//! ```
//!
//! Settings resolve in the order profile, config file, overrides, `--seed`.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error.
//!
//! Output directory layout:
//!
//! ```text
//! config.txt                resolved configuration
//! metrics.csv               epoch,phase,loss,lr,accuracy
//! pretrained/               checkpoint after pre-training
//! model/                    checkpoint after classifier training
//! manifest-<command>.txt    provenance of each command run here
//! eval.txt                  written by `eval`
//! islands.bin, islands.csv  written by `export-islands`
//! latent.bin, latent.csv    written by `export-latent`
//! ```

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use agglomerator::config::{Ablation, DatasetId, Precision, Profile, TrainConfig};
use agglomerator::data::{self, Dataset, Split};
use agglomerator::error::Error;
use agglomerator::interpret::{
    cifar10_superclass, neighbor_agreement_per_sample, overlap_metric, pca_2d, reduce_levels_2d, segment_islands, Dump,
    Reducer,
};
use agglomerator::model::Agglomerator;
use agglomerator::numerics::checkpoint;
use agglomerator::rng::{RngStreams, Stream};
use agglomerator::scalar::Scalar;
use agglomerator::training::{self, Metrics, RunOptions, EVAL_EPOCH};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

/// Digest of the sources this binary was built from.
pub const SOURCE_DIGEST: &str = env!("AGGLOMERATOR_SOURCE_DIGEST");

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (source ", env!("AGGLOMERATOR_SOURCE_DIGEST"), ")");

#[derive(Debug, Parser)]
#[command(name = "agglomerator", version = VERSION, about = "Train and inspect column-lattice part-whole networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Setting applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Base profile.
    #[arg(long, global = true, default_value = "desk")]
    pub profile: Profile,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Checkpoint directory to start from.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Progress line every N batches (0 disables).
    #[arg(long, global = true, default_value_t = 0)]
    pub log_every: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contrastive pre-training of the backbone.
    Pretrain(#[command(flatten)] Common),
    /// Classifier training on the frozen backbone, then test evaluation.
    Train(#[command(flatten)] Common),
    /// Test-split evaluation of a trained model.
    Eval(#[command(flatten)] Common),
    /// Per-level 2D fields, agreement and islands for test samples.
    ExportIslands {
        #[command(flatten)]
        common: Common,
        /// Number of test samples.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Cosine threshold for islands.
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
    },
    /// Features, labels and their PCA projection for test samples.
    ExportLatent {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Cells per axis of the overlap grid.
        #[arg(long, default_value_t = 100)]
        grid: usize,
    },
    /// Pre-training, classifier training and evaluation of one variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variant I-VI or its name.
        #[arg(long)]
        variant: Ablation,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::ExportIslands { .. } => "export-islands",
            Command::ExportLatent { .. } => "export-latent",
            Command::Ablate { .. } => "ablate",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Pretrain(c) | Command::Train(c) | Command::Eval(c) => c,
            Command::ExportIslands { common, .. } | Command::ExportLatent { common, .. } | Command::Ablate { common, .. } => {
                common
            }
        }
    }
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

/// Resolves the configuration of a command.
pub fn resolve_config(command: &Command) -> Result<TrainConfig, Failure> {
    let c = command.common();
    let mut cfg = match &c.config {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("config file {} not found", path.display())));
            }
            TrainConfig::from_file(c.profile, path)?
        }
        None => TrainConfig::profile(c.profile),
    };
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Command::Ablate { variant, .. } = command {
        cfg.ablation = *variant;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Short hex digest of the canonical configuration text.
pub fn config_hash(cfg: &TrainConfig) -> String {
    Sha256::digest(cfg.to_text().as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Runs a parsed command.
pub fn execute(command: &Command) -> Result<(), Failure> {
    let cfg = resolve_config(command)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Failure {
            code: 1,
            message: format!("thread pool: {e}"),
        })?;
    pool.install(|| match cfg.precision {
        Precision::F32 => Session::<f32>::new(command, cfg).run(),
        Precision::F64 => Session::<f64>::new(command, cfg).run(),
    })
}

struct Session<'a, T: Scalar> {
    command: &'a Command,
    cfg: TrainConfig,
    out: PathBuf,
    manifest: Vec<(String, String)>,
    started: Instant,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> Session<'a, T> {
    fn new(command: &'a Command, cfg: TrainConfig) -> Self {
        Self {
            out: command.common().out.clone(),
            command,
            cfg,
            manifest: Vec::new(),
            started: Instant::now(),
            _scalar: std::marker::PhantomData,
        }
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.manifest.push((key.into(), value.to_string()));
    }

    fn run(mut self) -> Result<(), Failure> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let cfg_path = self.out.join("config.txt");
        fs::write(&cfg_path, self.cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        match self.command {
            Command::Pretrain(_) => self.pretrain().map(drop)?,
            Command::Train(_) => self.train()?,
            Command::Eval(_) => self.eval()?,
            Command::ExportIslands { samples, tau, .. } => self.export_islands(*samples, *tau)?,
            Command::ExportLatent { samples, grid, .. } => self.export_latent(*samples, *grid)?,
            Command::Ablate { .. } => {
                let model = self.pretrain()?;
                self.train_from(model)?;
            }
        }
        self.write_manifest()
    }

    fn opts(&self, dir: &str) -> RunOptions {
        RunOptions {
            checkpoint_dir: Some(self.out.join(dir)),
            log_every: self.command.common().log_every,
        }
    }

    fn dir(&self) -> PathBuf {
        data::dataset_dir(&self.cfg)
    }

    fn load(&mut self, split: Split, amount: f64) -> Result<Dataset, Failure> {
        let full = data::load(self.cfg.dataset, &self.dir(), split)?;
        let streams = RngStreams::new(self.cfg.seed);
        let key = u64::from(split == Split::Test);
        let idx = data::stratified_subset(&full.labels, full.classes, amount, &mut streams.substream(Stream::Subset, key, 0))?;
        self.note(&format!("data.{split}"), format!("{} of {}", idx.len(), full.len()));
        Ok(if idx.len() == full.len() { full } else { full.select(&idx) })
    }

    fn fresh_model(&self) -> Result<Agglomerator<T>, Failure> {
        let streams = RngStreams::new(self.cfg.seed);
        Ok(Agglomerator::new(&self.cfg.model(), &mut streams.stream(Stream::Init))?)
    }

    fn load_model(&mut self, default: &[&str]) -> Result<Agglomerator<T>, Failure> {
        let dir = match &self.command.common().checkpoint {
            Some(d) => d.clone(),
            None => default
                .iter()
                .map(|d| self.out.join(d))
                .find(|d| d.join(checkpoint::MANIFEST_FILE).exists())
                .ok_or_else(|| {
                    Failure::from(Error::Checkpoint(format!(
                        "no checkpoint given and none of {default:?} exists under {}",
                        self.out.display()
                    )))
                })?,
        };
        let mut model = self.fresh_model()?;
        let ck = checkpoint::load(&mut model.store, &dir)?;
        self.note("checkpoint.input", format!("{} {}", dir.display(), ck.digest()));
        Ok(model)
    }

    fn pretrain(&mut self) -> Result<Agglomerator<T>, Failure> {
        let train = self.load(Split::Train, self.cfg.subset)?;
        let mut model = self.fresh_model()?;
        let mut metrics = Metrics::to_file(&self.out.join("metrics.csv"))?;
        let t = Instant::now();
        let losses = training::pretrain(&mut model, &self.cfg, &train, &mut metrics, &self.opts("pretrained"))?;
        self.note("pretrain.seconds", format!("{:.1}", t.elapsed().as_secs_f64()));
        self.note("pretrain.final_loss", losses.last().copied().unwrap_or(f64::NAN));
        let digest = training::save_checkpoint(&model, &self.out.join("pretrained"))?;
        self.note("checkpoint.pretrained", digest);
        Ok(model)
    }

    fn train(&mut self) -> Result<(), Failure> {
        let model = self.load_model(&["pretrained"])?;
        self.train_from(model)
    }

    fn train_from(&mut self, mut model: Agglomerator<T>) -> Result<(), Failure> {
        let train = self.load(Split::Train, self.cfg.subset)?;
        let test = self.load(Split::Test, self.cfg.test_subset)?;
        let mut metrics = Metrics::append_to(&self.out.join("metrics.csv"))?;
        let t = Instant::now();
        training::train_classifier(&mut model, &self.cfg, &train, &mut metrics, &self.opts("model"))?;
        self.note("train.seconds", format!("{:.1}", t.elapsed().as_secs_f64()));
        let digest = training::save_checkpoint(&model, &self.out.join("model"))?;
        self.note("checkpoint.model", digest);
        let t = Instant::now();
        let eval = training::evaluate(&model, &self.cfg, &test)?;
        self.note("eval.seconds", format!("{:.1}", t.elapsed().as_secs_f64()));
        training::record_evaluation(&mut metrics, self.cfg.epochs_train, &eval)?;
        self.report(&eval);
        Ok(())
    }

    fn report(&mut self, eval: &training::Evaluation) {
        println!(
            "test accuracy {:.4} (error {:.2}%) over {} samples",
            eval.accuracy,
            eval.error_percent(),
            eval.predictions.len()
        );
        self.note("result.accuracy", eval.accuracy);
        self.note("result.error_percent", eval.error_percent());
    }

    fn eval(&mut self) -> Result<(), Failure> {
        let model = self.load_model(&["model", "pretrained"])?;
        let test = self.load(Split::Test, self.cfg.test_subset)?;
        let eval = training::evaluate(&model, &self.cfg, &test)?;
        let mut text = format!("accuracy {}\nerror_percent {}\nloss {}\n", eval.accuracy, eval.error_percent(), eval.loss);
        for (c, a) in eval.per_class.iter().enumerate() {
            let _ = writeln!(text, "class {c} {a}");
        }
        let p = self.out.join("eval.txt");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.report(&eval);
        Ok(())
    }

    /// The first `n` test samples, their labels and final eval-mode states.
    fn test_states(&self, test: &Dataset, model: &Agglomerator<T>, idx: &[usize], key: u64) -> Result<agglomerator::lattice::LatticeState<T>, Failure> {
        let norm = data::Normalization::from_config(&self.cfg)?;
        let images = test.batch::<T>(idx, Some(&norm))?;
        let streams = RngStreams::new(self.cfg.seed);
        let init = model.init_state(idx.len(), &mut streams.substream(Stream::State, EVAL_EPOCH - 1, key));
        Ok(model.final_state(&images, &init)?)
    }

    fn export_islands(&mut self, samples: usize, tau: f64) -> Result<(), Failure> {
        let model = self.load_model(&["model", "pretrained"])?;
        let test = data::load(self.cfg.dataset, &self.dir(), Split::Test)?;
        const FIT: usize = 64;
        if samples == 0 || samples + FIT > test.len() {
            return Err(usage(format!("samples must be in 1..={}", test.len() - FIT)));
        }
        let held_out: Vec<usize> = (test.len() - FIT..test.len()).collect();
        let reducer = Reducer::fit(&self.test_states(&test, &model, &held_out, 0)?)?;
        let idx: Vec<usize> = (0..samples).collect();
        let state = self.test_states(&test, &model, &idx, 1)?;
        let fields = reduce_levels_2d(&state, &reducer);
        let k_top = self.cfg.levels;
        let mut agreement = vec![0f32; samples * k_top];
        let mut islands = vec![0f32; samples * k_top];
        for k in 1..=k_top {
            for (i, a) in neighbor_agreement_per_sample(&state, k)?.into_iter().enumerate() {
                agreement[i * k_top + k - 1] = a as f32;
                islands[i * k_top + k - 1] = segment_islands(&state, i, k, tau)?.count as f32;
            }
        }
        let labels: Vec<usize> = idx.iter().map(|&i| test.labels[i]).collect();
        let mut dump = Dump::new("islands");
        self.describe(&mut dump, &model);
        dump.meta("tau", tau).meta("reducer", format!("pca over {FIT} held-out test samples"));
        dump.array("fields", fields.shape(), fields.data().iter().map(|&v| v as f32).collect())?;
        dump.array("labels", &[samples], labels.iter().map(|&l| l as f32).collect())?;
        dump.array("agreement", &[samples, k_top], agreement.clone())?;
        dump.array("islands", &[samples, k_top], islands.clone())?;
        dump.write(&self.out.join("islands.bin"))?;
        let mut csv = String::from("sample,label");
        for k in 1..=k_top {
            let _ = write!(csv, ",agreement_{k}");
        }
        for k in 1..=k_top {
            let _ = write!(csv, ",islands_{k}");
        }
        csv.push('\n');
        for (i, l) in labels.iter().enumerate() {
            let _ = write!(csv, "{i},{l}");
            for k in 0..k_top {
                let _ = write!(csv, ",{}", agreement[i * k_top + k]);
            }
            for k in 0..k_top {
                let _ = write!(csv, ",{}", islands[i * k_top + k]);
            }
            csv.push('\n');
        }
        let p = self.out.join("islands.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        println!("wrote {} and islands.csv", self.out.join("islands.bin").display());
        Ok(())
    }

    fn export_latent(&mut self, samples: usize, grid: usize) -> Result<(), Failure> {
        let model = self.load_model(&["model", "pretrained"])?;
        let test = data::load(self.cfg.dataset, &self.dir(), Split::Test)?;
        if samples < 3 || samples > test.len() {
            return Err(usage(format!("samples must be in 3..={}", test.len())));
        }
        let norm = data::Normalization::from_config(&self.cfg)?;
        let streams = RngStreams::new(self.cfg.seed);
        let f1 = self.cfg.f1;
        let mut features = Vec::with_capacity(samples * f1);
        let all: Vec<usize> = (0..samples).collect();
        for (b, idx) in all.chunks(self.cfg.batch_size).enumerate() {
            let images = test.batch::<T>(idx, Some(&norm))?;
            let init = model.init_state(idx.len(), &mut streams.substream(Stream::State, EVAL_EPOCH, b as u64));
            let (f, _) = model.predict(&images, &init)?;
            features.extend(f.data().iter().map(|v| v.as_f64()));
        }
        let rows: Vec<Vec<f64>> = features.chunks(f1).map(<[f64]>::to_vec).collect();
        let (coords, pca) = pca_2d(&rows)?;
        let labels = &test.labels[..samples];
        let mut dump = Dump::new("latent");
        self.describe(&mut dump, &model);
        dump.meta("explained_variance", format!("{} {}", pca.explained_variance[0], pca.explained_variance[1]));
        if self.cfg.dataset == DatasetId::Cifar10 {
            let groups: Vec<usize> = labels.iter().map(|&l| cifar10_superclass(l)).collect();
            let o = overlap_metric(&coords, &groups, grid)?;
            dump.meta("overlap_percent", o);
            self.note("result.overlap_percent", o);
            println!("overlap {o:.2}% (vehicles vs animals, {grid}x{grid} grid)");
        }
        dump.array("features", &[samples, f1], features.iter().map(|&v| v as f32).collect())?;
        dump.array("labels", &[samples], labels.iter().map(|&l| l as f32).collect())?;
        dump.array("pca", &[samples, 2], coords.iter().flatten().map(|&v| v as f32).collect())?;
        dump.array("explained", &[2], pca.explained_variance.iter().map(|&v| v as f32).collect())?;
        dump.write(&self.out.join("latent.bin"))?;
        let mut csv = String::from("sample,label,pc1,pc2");
        for j in 0..f1 {
            let _ = write!(csv, ",f{j}");
        }
        csv.push('\n');
        for (i, (row, c)) in rows.iter().zip(&coords).enumerate() {
            let _ = write!(csv, "{i},{},{},{}", labels[i], c[0], c[1]);
            for v in row {
                let _ = write!(csv, ",{}", *v as f32);
            }
            csv.push('\n');
        }
        let p = self.out.join("latent.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        println!("wrote {} and latent.csv", self.out.join("latent.bin").display());
        Ok(())
    }

    fn describe(&self, dump: &mut Dump, model: &Agglomerator<T>) {
        let mut blob = Vec::new();
        for (_, p) in model.store.iter() {
            for v in p.value.data() {
                blob.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        let digest: String = Sha256::digest(&blob).iter().map(|b| format!("{b:02x}")).collect();
        dump.meta("config_hash", config_hash(&self.cfg))
            .meta("checkpoint", digest)
            .meta("dataset", self.cfg.dataset)
            .meta("seed", self.cfg.seed);
    }

    fn write_manifest(&mut self) -> Result<(), Failure> {
        let mut text = String::new();
        let _ = writeln!(text, "command = {}", self.command.name());
        let _ = writeln!(text, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(text, "source_digest = {SOURCE_DIGEST}");
        let _ = writeln!(text, "config_hash = {}", config_hash(&self.cfg));
        let _ = writeln!(text, "seed = {}", self.cfg.seed);
        let _ = writeln!(text, "threads = {}", rayon::current_num_threads());
        let _ = writeln!(text, "data_dir = {}", self.dir().display());
        for (k, v) in &self.manifest {
            let _ = writeln!(text, "{k} = {v}");
        }
        let _ = writeln!(text, "elapsed_seconds = {:.1}", self.started.elapsed().as_secs_f64());
        text.push_str("\n[config]\n");
        text.push_str(&self.cfg.to_text());
        let p = self.out.join(format!("manifest-{}.txt", self.command.name()));
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }
}

/// Reads `key = value` lines of a manifest up to its `[config]` section.
pub fn read_manifest(path: &Path) -> Option<Vec<(String, String)>> {
    let text = fs::read_to_string(path).ok()?;
    Some(
        text.lines()
            .take_while(|l| !l.starts_with('['))
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    )
}
