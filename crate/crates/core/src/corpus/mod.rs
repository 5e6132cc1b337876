//! Procedural toy corpus: manifest, on-disk layout, loading and ingestion.
//!
//! A corpus directory holds `manifest.toml`, `index.csv` and the PPM images
//! the index points at (paths relative to the directory).

pub mod generate;
pub mod ppm;
pub mod resize;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{indexed, Stream};
use crate::tensor::Tensor;

pub use generate::{generate_sample, DomainSample};

pub const GENERATOR_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub generator_version: u32,
    pub image_size: usize,
    pub train_domains: Vec<usize>,
    pub val_domains: Vec<usize>,
    pub test_domains: Vec<usize>,
    /// Labeled samples per train domain, holdout included.
    pub labeled_per_domain: usize,
    /// Taken out of the labeled samples as an in-domain evaluation split.
    pub holdout_per_domain: usize,
    pub unlabeled_per_domain: usize,
    pub val_per_domain: usize,
    pub test_per_domain: usize,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        CorpusManifest {
            seed: 0,
            generator_version: GENERATOR_VERSION,
            image_size: 32,
            train_domains: vec![0, 1, 2],
            val_domains: vec![3],
            test_domains: vec![4],
            labeled_per_domain: 1000,
            holdout_per_domain: 100,
            unlabeled_per_domain: 1000,
            val_per_domain: 500,
            test_per_domain: 500,
        }
    }
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.generator_version != GENERATOR_VERSION {
            return cfg(format!("generator_version {} (this build generates {GENERATOR_VERSION})", self.generator_version));
        }
        if self.image_size == 0 {
            return cfg("image_size must be positive".into());
        }
        for &d in self.train_domains.iter().chain(&self.val_domains).chain(&self.test_domains) {
            generate::domain_style(d)?;
        }
        if self.train_domains.is_empty() {
            return cfg("no train domains".into());
        }
        for held in [&self.val_domains, &self.test_domains] {
            if let Some(d) = held.iter().find(|d| self.train_domains.contains(d)) {
                return cfg(format!("domain {d} is both a train and a held-out domain"));
            }
        }
        if self.holdout_per_domain > self.labeled_per_domain {
            return cfg("holdout_per_domain exceeds labeled_per_domain".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are plain values")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The sample plan in generation order.
    fn plan(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        let mut block = |domain: usize, split: Split, n: usize, labeled: bool| {
            for j in 0..n {
                out.push(Entry {
                    path: format!("d{domain}/{split}_{j:05}.ppm"),
                    label: labeled.then_some(j % generate::NUM_CLASSES),
                    domain,
                    split,
                });
            }
        };
        for &d in &self.train_domains {
            block(d, Split::Train, self.labeled_per_domain - self.holdout_per_domain, true);
            block(d, Split::Holdout, self.holdout_per_domain, true);
            block(d, Split::Unlabeled, self.unlabeled_per_domain, false);
        }
        for &d in &self.val_domains {
            block(d, Split::Val, self.val_per_domain, true);
        }
        for &d in &self.test_domains {
            block(d, Split::Test, self.test_per_domain, true);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Holdout,
    Unlabeled,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::Holdout, Split::Unlabeled, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// One row of `index.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub path: String,
    /// `None` for the unlabeled pool.
    pub label: Option<usize>,
    pub domain: usize,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct Row {
    path: String,
    anatomy_label: String,
    domain_id: usize,
    split: String,
}

fn write_index(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        let label = e.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        w.serialize(Row { path: e.path.clone(), anatomy_label: label, domain_id: e.domain, split: e.split.to_string() })
            .map_err(|err| Error::Index { path: path.to_path_buf(), reason: err.to_string() })?;
    }
    let bytes = w.into_inner().map_err(|err| Error::Index { path: path.to_path_buf(), reason: err.to_string() })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<Vec<Entry>> {
    let bad = |reason: String| Error::Index { path: path.to_path_buf(), reason };
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    let mut out = Vec::new();
    for (line, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let label = match row.anatomy_label.as_str() {
            "-" => None,
            s => Some(s.parse().map_err(|_| bad(format!("row {}: label `{s}`", line + 1)))?),
        };
        let split = row.split.parse().map_err(|_| bad(format!("row {}: split `{}`", line + 1, row.split)))?;
        if split != Split::Unlabeled && label.is_none() {
            return Err(bad(format!("row {}: labeled split without a label", line + 1)));
        }
        out.push(Entry { path: row.path, label, domain: row.domain_id, split });
    }
    Ok(out)
}

/// Generate every image of `manifest` under `out_dir`.
pub fn build_corpus(manifest: &CorpusManifest, out_dir: &Path) -> Result<Dataset> {
    manifest.validate()?;
    let plan = manifest.plan();
    let size = manifest.image_size;
    let seed = manifest.seed;
    let encoded = par::map_range(plan.len(), |i| -> Result<Vec<u8>> {
        let e = &plan[i];
        // the structure label exists for unlabeled samples too; only the index withholds it
        let label = e.label.unwrap_or(i % generate::NUM_CLASSES);
        let s = generate_sample(label, e.domain, size, &mut indexed(seed, Stream::Data, i as u64))?;
        ppm::encode(size, size, &s.image)
    });
    for (e, bytes) in plan.iter().zip(encoded) {
        let path = out_dir.join(&e.path);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
        }
        fs::write(&path, bytes?).map_err(|err| Error::io(&path, err))?;
    }
    write_index(&out_dir.join(INDEX_FILE), &plan)?;
    let mpath = out_dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_toml()).map_err(|e| Error::io(&mpath, e))?;
    Ok(Dataset { root: out_dir.to_path_buf(), entries: plan })
}

/// An index plus the directory its paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Dataset { root: dir.to_path_buf(), entries: read_index(&dir.join(INDEX_FILE))? })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn filter(&self, keep: impl Fn(&Entry) -> bool) -> Dataset {
        Dataset { root: self.root.clone(), entries: self.entries.iter().filter(|e| keep(e)).cloned().collect() }
    }

    pub fn splits(&self, splits: &[Split]) -> Dataset {
        self.filter(|e| splits.contains(&e.split))
    }

    pub fn domains(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.entries.iter().map(|e| e.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    /// Labels in entry order; errors if any entry is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| e.label.ok_or_else(|| Error::Config(format!("{} has no label", e.path))))
            .collect()
    }

    /// Decode all images as an `N×3×size×size` tensor.
    pub fn images(&self, size: usize) -> Result<Tensor<f32>> {
        let plane = 3 * size * size;
        let decoded = par::map_range(self.len(), |i| ppm::read_image_sized(&self.root.join(&self.entries[i].path), size, size));
        let mut data = Vec::with_capacity(self.len() * plane);
        for img in decoded {
            data.extend_from_slice(&img?.data);
        }
        Tensor::new(&[self.len(), 3, size, size], data)
    }
}

/// Copy an external folder of PPMs (with its own `index.csv`) into
/// `out_dir`, renumbering domains through `domain_map` (identity when empty)
/// and resizing to `size×size` when `resize` is set.
pub fn ingest_folder(
    src: &Path,
    domain_map: &BTreeMap<usize, usize>,
    out_dir: &Path,
    size: usize,
    resize: bool,
) -> Result<Dataset> {
    let index_path = src.join(INDEX_FILE);
    let entries = read_index(&index_path)?;
    let listed: std::collections::HashSet<PathBuf> = entries.iter().map(|e| src.join(&e.path)).collect();
    let on_disk = ppm_files(src)?;
    if let Some(extra) = on_disk.iter().find(|p| !listed.contains(*p)) {
        return Err(Error::Index { path: index_path, reason: format!("{} is not listed", extra.display()) });
    }
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let domain = if domain_map.is_empty() {
            e.domain
        } else {
            *domain_map.get(&e.domain).ok_or_else(|| Error::Index {
                path: index_path.clone(),
                reason: format!("domain {} missing from the domain map", e.domain),
            })?
        };
        let from = src.join(&e.path);
        if !from.is_file() {
            return Err(Error::Index { path: index_path, reason: format!("{} is listed but missing", e.path) });
        }
        let img = ppm::read_image(&from)?;
        let data = if (img.width, img.height) == (size, size) {
            img.data
        } else if resize {
            resize::resize(&img.data, 3, img.height, img.width, size, size)
        } else {
            return Err(Error::Image {
                path: from,
                reason: format!("{}×{} image, expected {size}×{size}", img.width, img.height),
            });
        };
        let rel = format!("ingested/d{domain}/{i:06}.ppm");
        let to = out_dir.join(&rel);
        if let Some(dir) = to.parent() {
            fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
        }
        ppm::write_image(&to, size, size, &data)?;
        out.push(Entry { path: rel, label: e.label, domain, split: e.split });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_index(&out_dir.join(INDEX_FILE), &out)?;
    Ok(Dataset { root: out_dir.to_path_buf(), entries: out })
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "ppm") {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Outcome of the generator's own factor checks.
#[derive(Clone, Debug)]
pub struct SelfTest {
    pub per_domain: usize,
    /// Smallest standardized gap between the class means of the structure
    /// statistic, over domains.
    pub label_separation: f64,
    /// Largest two-sample Kolmogorov-Smirnov distance between domains.
    pub max_ks: f64,
    /// KS critical value at α = 0.001.
    pub ks_critical: f64,
}

pub const MIN_LABEL_SEPARATION: f64 = 2.0;

impl SelfTest {
    pub fn passed(&self) -> bool {
        self.label_separation > MIN_LABEL_SEPARATION && self.max_ks < self.ks_critical
    }
}

/// Render `per_domain` samples per domain, recover their structure through
/// the inverse colour map and compare the structure statistic across labels
/// and across domains.
pub fn generator_self_test(seed: u64, per_domain: usize, size: usize) -> Result<SelfTest> {
    let nd = generate::num_domains();
    let stats: Vec<Vec<(usize, f64)>> = (0..nd)
        .map(|d| {
            let style = generate::domain_style(d)?;
            par::map_range(per_domain, |j| {
                let label = j % generate::NUM_CLASSES;
                let mut rng = indexed(seed, Stream::Eval, (d * per_domain + j) as u64);
                let s = generate_sample(label, d, size, &mut rng)?;
                let structure = style.recover_structure(d, &s.image, size);
                Ok((label, generate::structure_statistic(&structure, size)))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut separation = f64::INFINITY;
    for per in &stats {
        let class = |l: usize| per.iter().filter(|(x, _)| *x == l).map(|(_, v)| *v).collect::<Vec<_>>();
        let (a, b) = (class(0), class(1));
        let (ma, va) = mean_var(&a);
        let (mb, vb) = mean_var(&b);
        separation = separation.min((mb - ma).abs() / ((va + vb) / 2.0).sqrt());
    }
    let mut max_ks = 0f64;
    for i in 0..nd {
        for j in i + 1..nd {
            let a: Vec<f64> = stats[i].iter().map(|x| x.1).collect();
            let b: Vec<f64> = stats[j].iter().map(|x| x.1).collect();
            max_ks = max_ks.max(ks_distance(&a, &b));
        }
    }
    let n = per_domain as f64;
    Ok(SelfTest { per_domain, label_separation: separation, max_ks, ks_critical: 1.949 * (2.0 / n).sqrt() })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}
