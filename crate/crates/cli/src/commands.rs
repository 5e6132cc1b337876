use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use patchmix::corpus::{self, CorpusManifest, Dataset, Split};
use patchmix::encoder::{Arch, EncoderConfig};
use patchmix::eval::classifier::{self, Augment, ClassifierConfig, ClassifierReport};
use patchmix::eval::grid::dump_mix_grid;
use patchmix::eval::metrics::{eval_reconstruction, format_db, write_metric_csv};
use patchmix::eval::scale::{scalability_experiments, training_pool};
use patchmix::loss::LossWeights;
use patchmix::optim::AdamWConfig;
use patchmix::rng::{self, Stream};
use patchmix::train::{self, EncoderCheckpoint, TrainConfig, TrainOptions};
use patchmix::Tensor;

use crate::config::{self, require_file};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn is_false(b: &bool) -> bool {
    !*b
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(patchmix::Error::Io { path: path.to_path_buf(), source: e })
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| io(path, e))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    require_file(dir, "data directory")?;
    require_file(&dir.join(corpus::INDEX_FILE), "corpus index")?;
    Ok(Dataset::load(dir)?)
}

fn load_checkpoint(path: &Path) -> Result<EncoderCheckpoint> {
    require_file(path, "checkpoint")?;
    Ok(EncoderCheckpoint::load(path, None)?)
}

fn parse_splits(names: &[String]) -> Result<Vec<Split>> {
    names.iter().map(|s| s.parse::<Split>().map_err(|e| CliError::Usage(e.to_string()))).collect()
}

// ---- gen-data ----

#[derive(Args, Serialize)]
pub struct GenDataArgs {
    /// Flat TOML file with any of this command's settings.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Corpus manifest; the built-in default when omitted.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct GenDataRun {
    #[serde(skip_serializing_if = "Option::is_none")]
    manifest: Option<PathBuf>,
    out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut run: GenDataRun = config::resolve(args.config.as_deref(), &args)?;
    let mut manifest = match &run.manifest {
        Some(p) => {
            require_file(p, "manifest")?;
            CorpusManifest::load(p)?
        }
        None => CorpusManifest::default(),
    };
    if let Some(seed) = run.seed {
        manifest.seed = seed;
    }
    run.seed = Some(manifest.seed);
    if run.out_dir.as_os_str().is_empty() {
        return Err(CliError::Usage("missing --out-dir".into()));
    }
    let out = config::out_dir(&run.out_dir);
    let ds = corpus::build_corpus(&manifest, &out)?;
    config::save(&out, "gen-data", &run)?;
    for s in Split::ALL {
        eprintln!("{s}: {}", ds.count(s));
    }
    Ok(())
}

// ---- train-encoder ----

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    /// Synthetic images per sample (M).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mixes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_min: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_a: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_c: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_r: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Add the unlabeled pool to the training images.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    include_unlabeled: bool,
    /// base (L=96) or deep (depth 8, L=144).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    arch: Option<String>,
    /// Continue from a checkpoint written by an identical configuration.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    resume: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRun {
    data: PathBuf,
    out_dir: PathBuf,
    epochs: usize,
    batch: usize,
    mixes: usize,
    lr: f64,
    lr_min: f64,
    weight_decay: f64,
    lambda_a: f64,
    lambda_c: f64,
    lambda_r: f64,
    seed: u64,
    include_unlabeled: bool,
    arch: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    resume: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainRun {
            data: PathBuf::new(),
            out_dir: PathBuf::new(),
            epochs: t.epochs,
            batch: t.batch,
            mixes: t.mixes,
            lr: t.lr,
            lr_min: t.lr_min,
            weight_decay: t.adamw.weight_decay,
            lambda_a: t.weights.anatomy,
            lambda_c: t.weights.characteristic,
            lambda_r: t.weights.reconstruction,
            seed: t.seed,
            include_unlabeled: false,
            arch: Arch::Base.to_string(),
            resume: None,
        }
    }
}

pub fn train_encoder(args: TrainArgs) -> Result<()> {
    let run: TrainRun = config::resolve(args.config.as_deref(), &args)?;
    let arch: Arch = run.arch.parse()?;
    let enc = EncoderConfig::for_arch(arch);
    let cfg = TrainConfig {
        epochs: run.epochs,
        batch: run.batch,
        mixes: run.mixes,
        lr: run.lr,
        lr_min: run.lr_min,
        adamw: AdamWConfig { weight_decay: run.weight_decay, ..AdamWConfig::default() },
        weights: LossWeights::new(run.lambda_a, run.lambda_c, run.lambda_r)?,
        seed: run.seed,
    };
    cfg.validate()?;
    let ds = load_dataset(&run.data)?;
    if run.out_dir.as_os_str().is_empty() {
        return Err(CliError::Usage("missing --out-dir".into()));
    }
    let resume = match &run.resume {
        Some(p) => {
            require_file(p, "resume checkpoint")?;
            Some(EncoderCheckpoint::load(p, Some(&enc))?)
        }
        None => None,
    };
    let out = config::out_dir(&run.out_dir);
    config::save(&out, "train-encoder", &run)?;
    let pool = training_pool(&ds, run.include_unlabeled);
    let images = pool.images(enc.image_size)?;
    eprintln!("training {arch} encoder on {} images, {} steps per epoch", pool.len(), train::steps_per_epoch(pool.len(), cfg.batch));
    let progress = |r: &train::EpochRecord| {
        eprintln!("epoch {:>3}  L_total {:.6}  L_R {:.6}  lr {:.2e}  {:.0}s", r.epoch, r.total, r.reconstruction, r.lr, r.wall_time)
    };
    let opts = TrainOptions { out_dir: Some(out), resume, stop_after: None, on_epoch: Some(&progress) };
    train::train_encoder(&images, enc, &cfg, opts)?;
    Ok(())
}

// ---- eval ----

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Encoder checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    /// Comma-separated splits.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    splits: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRun {
    data: PathBuf,
    checkpoint: PathBuf,
    out_dir: PathBuf,
    splits: Vec<String>,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            data: PathBuf::new(),
            checkpoint: PathBuf::new(),
            out_dir: PathBuf::new(),
            splits: [Split::Holdout, Split::Val, Split::Test].map(|s| s.to_string()).to_vec(),
        }
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let run: EvalRun = config::resolve(args.config.as_deref(), &args)?;
    let splits = parse_splits(&run.splits)?;
    let ck = load_checkpoint(&run.checkpoint)?;
    let ds = load_dataset(&run.data)?;
    if run.out_dir.as_os_str().is_empty() {
        return Err(CliError::Usage("missing --out-dir".into()));
    }
    let out = config::out_dir(&run.out_dir);
    config::save(&out, "eval", &run)?;
    let reports = splits
        .iter()
        .map(|&s| eval_reconstruction(&ck.encoder, &ds, s))
        .collect::<patchmix::Result<Vec<_>>>()?;
    write_metric_csv(&out.join("psnr.csv"), "psnr", &reports)?;
    for r in &reports {
        eprintln!("{:<8} PSNR {} dB (n={})", r.split, format_db(r.overall.mean), r.overall.n);
    }
    Ok(())
}

// ---- mixgrid ----

#[derive(Args, Serialize)]
pub struct MixgridArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    /// Number of anatomy sources (columns).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sources: Option<usize>,
    /// Number of characteristic donors (rows).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    donors: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    source_splits: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    donor_splits: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixgridRun {
    data: PathBuf,
    checkpoint: PathBuf,
    out_dir: PathBuf,
    sources: usize,
    donors: usize,
    source_splits: Vec<String>,
    donor_splits: Vec<String>,
    seed: u64,
}

impl Default for MixgridRun {
    fn default() -> Self {
        MixgridRun {
            data: PathBuf::new(),
            checkpoint: PathBuf::new(),
            out_dir: PathBuf::new(),
            sources: 6,
            donors: 4,
            source_splits: vec![Split::Holdout.to_string()],
            donor_splits: vec![Split::Val.to_string(), Split::Test.to_string()],
            seed: 0,
        }
    }
}

/// `count` entries spread evenly over `ds`.
fn spread(ds: &Dataset, count: usize, size: usize) -> Result<(Dataset, Tensor<f32>)> {
    if count == 0 || count > ds.len() {
        return Err(CliError::Usage(format!("cannot pick {count} of {} images", ds.len())));
    }
    let picked = Dataset { root: ds.root.clone(), entries: (0..count).map(|k| ds.entries[k * ds.len() / count].clone()).collect() };
    let images = picked.images(size)?;
    Ok((picked, images))
}

pub fn mixgrid(args: MixgridArgs) -> Result<()> {
    let run: MixgridRun = config::resolve(args.config.as_deref(), &args)?;
    let ck = load_checkpoint(&run.checkpoint)?;
    let ds = load_dataset(&run.data)?;
    if run.out_dir.as_os_str().is_empty() {
        return Err(CliError::Usage("missing --out-dir".into()));
    }
    let size = ck.encoder.config().image_size;
    let (src_set, sources) = spread(&ds.splits(&parse_splits(&run.source_splits)?), run.sources, size)?;
    let (donor_set, donors) = spread(&ds.splits(&parse_splits(&run.donor_splits)?), run.donors, size)?;
    let out = config::out_dir(&run.out_dir);
    config::save(&out, "mixgrid", &run)?;
    let mut rng = rng::stream(run.seed, Stream::Eval);
    let grid = dump_mix_grid(&ck.encoder, &sources, &donors, &mut rng, &out.join("grid.ppm"))?;
    let mut csv = String::from("row,donor,patch,agreement\n");
    for (i, a) in grid.row_color_agreement().into_iter().enumerate() {
        csv.push_str(&format!("{},{},{},{a:.4}\n", i + 1, donor_set.entries[i].path, grid.donor_patches[i]));
    }
    write(&out.join("grid.csv"), &csv)?;
    eprintln!(
        "grid {}×{} tiles, sources {:?}; donor colour agreement {:.2}",
        grid.tiles().0,
        grid.tiles().1,
        src_set.entries.iter().map(|e| e.domain).collect::<Vec<_>>(),
        grid.color_agreement()
    );
    Ok(())
}

// ---- train-classifier ----

#[derive(Args, Serialize)]
pub struct ClassifierArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Frozen encoder for mix augmentation.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    /// none, mix or both.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    augment: Option<String>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mixes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    image_size: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierRun {
    data: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    out_dir: PathBuf,
    augment: String,
    seeds: Vec<u64>,
    epochs: usize,
    batch: usize,
    lr: f64,
    mixes: usize,
    image_size: usize,
}

impl Default for ClassifierRun {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        ClassifierRun {
            data: PathBuf::new(),
            checkpoint: None,
            out_dir: PathBuf::new(),
            augment: "both".into(),
            seeds: vec![0, 1, 2],
            epochs: c.epochs,
            batch: c.batch,
            lr: c.lr,
            mixes: c.mixes,
            image_size: 32,
        }
    }
}

/// Mean accuracy per (augmentation, split) over seeds.
pub fn summary_csv(reports: &[ClassifierReport]) -> String {
    let mut s = String::from("augment,split,mean_accuracy,seeds\n");
    for mode in [Augment::None, Augment::Mix] {
        let runs: Vec<&ClassifierReport> = reports.iter().filter(|r| r.augment == mode).collect();
        if runs.is_empty() {
            continue;
        }
        for split in [Split::Holdout, Split::Val, Split::Test] {
            let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy_on(split)).collect();
            if !accs.is_empty() {
                s.push_str(&format!("{mode},{split},{:.4},{}\n", accs.iter().sum::<f64>() / accs.len() as f64, accs.len()));
            }
        }
    }
    s
}

pub fn train_classifier(args: ClassifierArgs) -> Result<()> {
    let run: ClassifierRun = config::resolve(args.config.as_deref(), &args)?;
    let modes = match run.augment.as_str() {
        "both" => vec![Augment::None, Augment::Mix],
        other => vec![other.parse::<Augment>()?],
    };
    let encoder = match &run.checkpoint {
        Some(p) => Some(load_checkpoint(p)?.encoder),
        None if modes.contains(&Augment::Mix) => {
            return Err(CliError::Usage("mix augmentation needs --checkpoint".into()));
        }
        None => None,
    };
    let ds = load_dataset(&run.data)?;
    if run.out_dir.as_os_str().is_empty() || run.seeds.is_empty() {
        return Err(CliError::Usage("missing --out-dir or --seeds".into()));
    }
    let out = config::out_dir(&run.out_dir);
    config::save(&out, "train-classifier", &run)?;
    let mut reports = Vec::new();
    for &seed in &run.seeds {
        for &augment in &modes {
            let cfg = ClassifierConfig { epochs: run.epochs, batch: run.batch, lr: run.lr, mixes: run.mixes, augment, seed, ..ClassifierConfig::default() };
            let (_, report) = classifier::train_classifier(&ds, encoder.as_ref(), &cfg, run.image_size, Some(&out))?;
            eprintln!(
                "seed {seed} {augment:<4}  OOD val {:.4}  OOD test {:.4}",
                report.accuracy_on(Split::Val).unwrap_or(f64::NAN),
                report.accuracy_on(Split::Test).unwrap_or(f64::NAN)
            );
            reports.push(report);
        }
    }
    write(&out.join("comparison.csv"), &classifier::comparison_csv(&reports))?;
    write(&out.join("summary.csv"), &summary_csv(&reports))?;
    Ok(())
}

// ---- scale-exp ----

#[derive(Args, Serialize)]
pub struct ScaleArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// Base encoder checkpoint; its training settings are reused.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    /// Deep-variant epochs as a fraction of the base epochs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    deep_fraction: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScaleRun {
    data: PathBuf,
    checkpoint: PathBuf,
    out_dir: PathBuf,
    deep_fraction: f64,
}

impl Default for ScaleRun {
    fn default() -> Self {
        ScaleRun { data: PathBuf::new(), checkpoint: PathBuf::new(), out_dir: PathBuf::new(), deep_fraction: 0.2 }
    }
}

pub fn scale_exp(args: ScaleArgs) -> Result<()> {
    let run: ScaleRun = config::resolve(args.config.as_deref(), &args)?;
    if !(run.deep_fraction > 0.0 && run.deep_fraction <= 1.0) {
        return Err(CliError::Usage(format!("deep_fraction {} outside (0, 1]", run.deep_fraction)));
    }
    let base = load_checkpoint(&run.checkpoint)?;
    let ds = load_dataset(&run.data)?;
    if run.out_dir.as_os_str().is_empty() {
        return Err(CliError::Usage("missing --out-dir".into()));
    }
    let out = config::out_dir(&run.out_dir);
    config::save(&out, "scale-exp", &run)?;
    let table = scalability_experiments(&ds, &base, run.deep_fraction, &out)?;
    eprint!("{}", table.to_markdown());
    Ok(())
}
