//! Reconstruction PSNR and its per-split, per-domain summaries.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Dataset, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::par;
use crate::synth::reconstruct;
use crate::tensor::Tensor;

pub const METRIC_CSV_HEADER: &str = "metric,split,domain,mean,std,n";

/// Forward passes per evaluation chunk.
const EVAL_CHUNK: usize = 64;

/// `10·log10(1/MSE)` with peak 1; identical inputs give `f64::INFINITY`.
pub fn psnr(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!("psnr of {} and {} values", x.len(), y.len())));
    }
    let mse = x.iter().zip(y).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn psnr_tensor(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("psnr of {:?} and {:?}", x.shape(), y.shape())));
    }
    psnr(x.data(), y.data())
}

/// CSV rendering: infinite values become the literal `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// Mean and sample standard deviation; any infinite value makes the mean infinite.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN, n };
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Summary { mean: f64::INFINITY, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Summary { mean, std: var.sqrt(), n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub split: String,
    pub overall: Summary,
    pub per_domain: Vec<(usize, Summary)>,
    /// Per-sample values in dataset order.
    pub samples: Vec<f64>,
}

impl MetricReport {
    pub fn csv_rows(&self, metric: &str) -> String {
        let mut s = String::new();
        let mut row = |domain: &str, m: &Summary| {
            let std = if m.std.is_nan() { "nan".to_string() } else { format!("{:.4}", m.std) };
            writeln!(s, "{metric},{},{domain},{},{std},{}", self.split, format_db(m.mean), m.n).unwrap();
        };
        row("all", &self.overall);
        for (d, m) in &self.per_domain {
            row(&d.to_string(), m);
        }
        s
    }
}

/// Write a metric CSV with one block of rows per report.
pub fn write_metric_csv(path: &Path, metric: &str, reports: &[MetricReport]) -> Result<()> {
    let mut s = format!("{METRIC_CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_rows(metric));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Per-sample PSNR of `reconstruct(x)` against `x`.
pub fn reconstruction_psnr(encoder: &Encoder<f32>, images: &Tensor<f32>) -> Result<Vec<f64>> {
    let n = images.shape()[0];
    let sample = images.len() / n.max(1);
    let chunks = n.div_ceil(EVAL_CHUNK);
    let per_chunk = par::map_range(chunks, |c| -> Result<Vec<f64>> {
        let (lo, hi) = (c * EVAL_CHUNK, ((c + 1) * EVAL_CHUNK).min(n));
        let mut shape = images.shape().to_vec();
        shape[0] = hi - lo;
        let x = Tensor::new(&shape, images.data()[lo * sample..hi * sample].to_vec())?;
        let r = reconstruct(encoder, &x)?;
        (0..hi - lo).map(|i| psnr(&x.data()[i * sample..(i + 1) * sample], &r.data()[i * sample..(i + 1) * sample])).collect()
    });
    let mut out = Vec::with_capacity(n);
    for chunk in per_chunk {
        out.extend(chunk?);
    }
    Ok(out)
}

/// PSNR report of the encoder's self-reconstruction on one split.
pub fn eval_reconstruction(encoder: &Encoder<f32>, dataset: &Dataset, split: Split) -> Result<MetricReport> {
    let subset = dataset.splits(&[split]);
    if subset.is_empty() {
        return Err(Error::Config(format!("split `{split}` is empty")));
    }
    let images = subset.images(encoder.config().image_size)?;
    let samples = reconstruction_psnr(encoder, &images)?;
    let per_domain = subset
        .domains()
        .into_iter()
        .map(|d| {
            let vals: Vec<f64> =
                subset.entries.iter().zip(&samples).filter(|(e, _)| e.domain == d).map(|(_, v)| *v).collect();
            (d, Summary::of(&vals))
        })
        .collect();
    Ok(MetricReport { split: split.to_string(), overall: Summary::of(&samples), per_domain, samples })
}
