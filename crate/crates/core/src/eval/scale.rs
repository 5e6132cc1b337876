//! Scalability trends: a larger (unlabeled) training pool and a deeper,
//! wider encoder, each compared with the base run on reconstruction PSNR.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Dataset, Split};
use crate::encoder::{Arch, EncoderConfig};
use crate::error::{Error, Result};
use crate::train::{train_encoder, EncoderCheckpoint, TrainConfig, TrainOptions};

use super::metrics::{eval_reconstruction, format_db, MetricReport};

/// Splits every variant is scored on.
pub const TREND_SPLITS: [Split; 3] = [Split::Holdout, Split::Val, Split::Test];

/// A trained encoder and its PSNR on [`TREND_SPLITS`].
#[derive(Clone, Debug)]
pub struct VariantResult {
    pub name: String,
    pub arch: Arch,
    pub epochs: usize,
    pub train_samples: usize,
    pub wall_time: f64,
    pub reports: Vec<MetricReport>,
}

impl VariantResult {
    pub fn psnr(&self, split: Split) -> Option<f64> {
        self.reports.iter().find(|r| r.split == split.as_str()).map(|r| r.overall.mean)
    }
}

/// Training pool: the labeled train split, plus the unlabeled pool when asked.
pub fn training_pool(dataset: &Dataset, include_unlabeled: bool) -> Dataset {
    if include_unlabeled {
        dataset.splits(&[Split::Train, Split::Unlabeled])
    } else {
        dataset.splits(&[Split::Train])
    }
}

pub fn score(name: &str, ck: &EncoderCheckpoint, dataset: &Dataset, train_samples: usize) -> Result<VariantResult> {
    let reports = TREND_SPLITS
        .iter()
        .filter(|&&s| dataset.count(s) > 0)
        .map(|&s| eval_reconstruction(&ck.encoder, dataset, s))
        .collect::<Result<Vec<_>>>()?;
    let c = ck.encoder.config();
    Ok(VariantResult {
        name: name.to_string(),
        arch: if *c == EncoderConfig::deep() { Arch::Deep } else { Arch::Base },
        epochs: ck.state.epoch,
        train_samples,
        wall_time: ck.state.wall_time,
        reports,
    })
}

/// Train one variant from scratch and score it.
pub fn run_variant(
    name: &str,
    dataset: &Dataset,
    arch: Arch,
    include_unlabeled: bool,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<VariantResult> {
    let enc = EncoderConfig::for_arch(arch);
    let pool = training_pool(dataset, include_unlabeled);
    if pool.is_empty() {
        return Err(Error::Config("empty training pool".into()));
    }
    let images = pool.images(enc.image_size)?;
    let opts = TrainOptions { out_dir: out_dir.map(Path::to_path_buf), resume: None, stop_after: None, on_epoch: None };
    let outcome = train_encoder(&images, enc, cfg, opts)?;
    score(name, &outcome.checkpoint, dataset, pool.len())
}

/// Epochs for the deep variant: `fraction` of the base schedule, at least one.
pub fn reduced_epochs(base_epochs: usize, fraction: f64) -> usize {
    ((base_epochs as f64 * fraction).round() as usize).max(1)
}

/// One row per scaling axis, each against the same base run.
#[derive(Clone, Debug)]
pub struct TrendTable {
    pub base: VariantResult,
    pub rows: Vec<(String, VariantResult)>,
}

pub const TREND_CSV_HEADER: &str =
    "axis,variant,arch,epochs,train_samples,holdout_psnr,val_psnr,test_psnr,base_test_psnr,test_delta,wall_time";

impl TrendTable {
    fn cells(&self, axis: &str, v: &VariantResult) -> Vec<String> {
        let db = |r: &VariantResult, s| r.psnr(s).map_or("-".to_string(), format_db);
        let delta = match (v.psnr(Split::Test), self.base.psnr(Split::Test)) {
            (Some(a), Some(b)) => format!("{:+.4}", a - b),
            _ => "-".to_string(),
        };
        vec![
            axis.to_string(),
            v.name.clone(),
            v.arch.to_string(),
            v.epochs.to_string(),
            v.train_samples.to_string(),
            db(v, Split::Holdout),
            db(v, Split::Val),
            db(v, Split::Test),
            db(&self.base, Split::Test),
            delta,
            format!("{:.1}", v.wall_time),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TREND_CSV_HEADER}\n");
        for (axis, v) in &self.rows {
            s.push_str(&self.cells(axis, v).join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let header: Vec<&str> = TREND_CSV_HEADER.split(',').collect();
        let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
        for (axis, v) in &self.rows {
            writeln!(s, "| {} |", self.cells(axis, v).join(" | ")).unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("trend.csv", self.to_csv()), ("trend.md", self.to_markdown())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Retrain with the unlabeled pool and with the deep encoder at
/// `deep_fraction` of the base epochs; compare both with `base`.
pub fn scalability_experiments(
    dataset: &Dataset,
    base: &EncoderCheckpoint,
    deep_fraction: f64,
    out_dir: &Path,
) -> Result<TrendTable> {
    if *base.encoder.config() != EncoderConfig::toy() {
        return Err(Error::Config("the base checkpoint must use the base architecture".into()));
    }
    let cfg = base.train;
    let base_result = score("base", base, dataset, training_pool(dataset, false).len())?;
    let unlabeled = run_variant("unlabeled", dataset, Arch::Base, true, &cfg, Some(&out_dir.join("unlabeled")))?;
    let deep_cfg = TrainConfig { epochs: reduced_epochs(cfg.epochs, deep_fraction), ..cfg };
    let deep = run_variant("deep", dataset, Arch::Deep, false, &deep_cfg, Some(&out_dir.join("deep")))?;
    let table = TrendTable { base: base_result, rows: vec![("data".into(), unlabeled), ("model".into(), deep)] };
    table.write(out_dir)?;
    Ok(table)
}
