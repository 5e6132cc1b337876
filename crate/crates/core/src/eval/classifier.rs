//! Downstream classifier: a small CNN trained either on the originals
//! alone or on the originals plus mixed synthetic images.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::corpus::{Dataset, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::mixing::build_mix_plan;
use crate::nn::{Bound, Linear, ParamSet};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::par;
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Tensor, Var};

use super::synthesize_mixes;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    Mix,
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augment::None => "none",
            Augment::Mix => "mix",
        })
    }
}

impl FromStr for Augment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "mix" => Ok(Augment::Mix),
            other => Err(Error::Config(format!("unknown augmentation `{other}` (none|mix)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Output channels of the four 3×3 convolutions; all but the first use stride 2.
    pub widths: [usize; 4],
    pub classes: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub adamw: AdamWConfig,
    pub augment: Augment,
    /// Synthetic images per original in mix mode.
    pub mixes: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            widths: [16, 32, 64, 48],
            classes: 2,
            epochs: 8,
            batch: 16,
            lr: 2e-3,
            lr_min: 0.0,
            adamw: AdamWConfig::default(),
            augment: Augment::None,
            mixes: 4,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.widths.contains(&0) || self.classes < 2 {
            return bad("classifier widths must be positive and classes ≥ 2");
        }
        if self.epochs == 0 || self.batch < 2 || self.mixes == 0 {
            return bad("classifier epochs, batch ≥ 2 and mixes must be positive");
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("classifier learning rates must satisfy 0 ≤ lr_min ≤ lr, lr > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
}

/// Four 3×3 ReLU convolutions, global average pooling, one linear head.
#[derive(Clone, Debug)]
pub struct SmallCnn {
    params: ParamSet<f32>,
    convs: Vec<Conv>,
    head: Linear,
}

impl SmallCnn {
    pub fn new(widths: [usize; 4], channels: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut cin = channels;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let fan_in = 9 * cin;
                let weight = params.push_normal(&format!("conv{i}.weight"), &[fan_in, cout], (2.0 / fan_in as f64).sqrt(), rng);
                let bias = params.push(format!("conv{i}.bias"), Tensor::zeros(&[cout]));
                cin = cout;
                Conv { weight, bias, stride: if i == 0 { 1 } else { 2 } }
            })
            .collect();
        let head = Linear::init(&mut params, "head", cin, classes, (1.0 / cin as f64).sqrt(), rng);
        SmallCnn { params, convs, head }
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    /// Logits `N×classes` for NHWC input.
    fn forward<'g>(&self, p: &Bound<'g, f32>, x: Var<'g, f32>) -> Result<Var<'g, f32>> {
        let mut h = x;
        for conv in &self.convs {
            let cols = h.im2col(3, conv.stride, 1)?;
            let s = cols.shape();
            let cout = p.var(conv.weight).shape()[1];
            h = cols
                .reshape(&[s[0] * s[1] * s[2], s[3]])?
                .matmul(p.var(conv.weight))?
                .add(p.var(conv.bias))?
                .relu()
                .reshape(&[s[0], s[1], s[2], cout])?;
        }
        let s = h.shape();
        let pooled = h.reshape(&[s[0], s[1] * s[2], s[3]])?.mean_axis(1)?;
        self.head.forward(p, pooled)
    }

    /// Predicted classes for `N×C×H×W` images.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        const CHUNK: usize = 128;
        let n = images.shape()[0];
        let len = images.len() / n.max(1);
        let chunks = par::map_range(n.div_ceil(CHUNK), |c| -> Result<Vec<usize>> {
            let (lo, hi) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
            let mut shape = images.shape().to_vec();
            shape[0] = hi - lo;
            let x = Tensor::new(&shape, images.data()[lo * len..hi * len].to_vec())?.permute(&[0, 2, 3, 1])?;
            let g = Graph::new();
            let p = self.params.bind(&g, false);
            let logits = self.forward(&p, g.constant(x))?.value();
            let k = logits.shape()[1];
            Ok(logits.data().chunks(k).map(argmax).collect())
        });
        let mut out = Vec::with_capacity(n);
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, cfg: &ClassifierConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", "classifier");
        ck.set("widths", cfg.widths.map(|w| w.to_string()).join(" "));
        ck.set("classes", cfg.classes);
        ck.set("augment", cfg.augment);
        ck.set("seed", cfg.seed);
        for (name, t) in self.params.iter() {
            ck.push_block(format!("param/{name}"), t.clone());
        }
        ck
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct ClassifierReport {
    pub augment: Augment,
    pub seed: u64,
    /// Accuracy on each evaluated split.
    pub accuracy: Vec<(Split, f64)>,
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    /// Images per optimizer step (originals plus synthetic).
    pub step_batch: usize,
    pub wall_time: f64,
}

impl ClassifierReport {
    pub fn accuracy_on(&self, split: Split) -> Option<f64> {
        self.accuracy.iter().find(|(s, _)| *s == split).map(|(_, a)| *a)
    }
}

pub const COMPARISON_CSV_HEADER: &str = "augment,seed,split,accuracy";

pub fn comparison_csv(reports: &[ClassifierReport]) -> String {
    let mut s = format!("{COMPARISON_CSV_HEADER}\n");
    for r in reports {
        for (split, acc) in &r.accuracy {
            s.push_str(&format!("{},{},{split},{acc:.4}\n", r.augment, r.seed));
        }
    }
    s
}

/// One training batch: originals, then (in mix mode) `N·M` synthetic images
/// whose labels come from their anatomy source.
pub fn training_batch(
    images: &Tensor<f32>,
    labels: &[usize],
    encoder: Option<&Encoder<f32>>,
    mixes: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let Some(enc) = encoder else {
        return Ok((images.clone(), labels.to_vec()));
    };
    let n = images.shape()[0];
    let plan = build_mix_plan(n, mixes, enc.config().num_patches(), rng)?;
    let syn = synthesize_mixes(enc, images, &plan)?;
    let mut data = images.data().to_vec();
    data.extend_from_slice(syn.data());
    let mut shape = images.shape().to_vec();
    shape[0] = n * (1 + mixes);
    let mut all = labels.to_vec();
    all.extend(plan.anatomy_indices().into_iter().map(|i| labels[i]));
    Ok((Tensor::new(&shape, data)?, all))
}

/// Train on the labeled `train` split, report accuracy on holdout, val and test.
pub fn train_classifier(
    dataset: &Dataset,
    encoder: Option<&Encoder<f32>>,
    cfg: &ClassifierConfig,
    image_size: usize,
    out_dir: Option<&Path>,
) -> Result<(SmallCnn, ClassifierReport)> {
    cfg.validate()?;
    let encoder = match cfg.augment {
        Augment::Mix => Some(encoder.ok_or_else(|| Error::Config("mix augmentation needs an encoder checkpoint".into()))?),
        Augment::None => None,
    };
    if let Some(e) = encoder {
        if e.config().image_size != image_size {
            return Err(Error::Config(format!("encoder expects {0}×{0} images, corpus has {image_size}", e.config().image_size)));
        }
    }
    let train = dataset.splits(&[Split::Train]);
    if train.is_empty() {
        return Err(Error::Config("labeled train split is empty".into()));
    }
    let started = Instant::now();
    let images = train.images(image_size)?;
    let labels = train.labels()?;
    let n = labels.len();
    let batch = cfg.batch.min(n);
    let per_epoch = n / batch;
    let total = per_epoch * cfg.epochs;
    let len = images.len() / n;

    let mut model = SmallCnn::new(cfg.widths, images.shape()[1], cfg.classes, &mut rng::indexed(cfg.seed, Stream::Classifier, 0));
    let mut opt = AdamW::new(cfg.adamw, &model.params);
    let mut mix_rng = rng::indexed(cfg.seed, Stream::Classifier, 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut step_batch = batch;
    for epoch in 0..cfg.epochs {
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.shuffle(&mut rng::indexed(cfg.seed, Stream::Shuffle, (1 << 32) | epoch as u64));
        let mut sum = 0.0;
        for s in 0..per_epoch {
            let idx = &order[s * batch..(s + 1) * batch];
            let mut data = Vec::with_capacity(batch * len);
            for &i in idx {
                data.extend_from_slice(&images.data()[i * len..(i + 1) * len]);
            }
            let mut shape = images.shape().to_vec();
            shape[0] = batch;
            let x = Tensor::new(&shape, data)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (x, y) = training_batch(&x, &y, encoder, cfg.mixes, &mut mix_rng)?;
            step_batch = y.len();

            let lr = cosine_lr(step, total, cfg.lr, cfg.lr_min)?;
            let g = Graph::new();
            let p = model.params.bind(&g, true);
            let loss = model.forward(&p, g.constant(x.permute(&[0, 2, 3, 1])?))?.cross_entropy(&y)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, step, detail: format!("classifier loss {value}") });
            }
            g.backward(loss)?;
            let grads = p.grads();
            drop(g);
            opt.step(&mut model.params, &grads, lr)?;
            sum += value;
            step += 1;
        }
        epoch_loss.push(sum / per_epoch as f64);
    }

    let mut scores = Vec::new();
    for split in [Split::Holdout, Split::Val, Split::Test] {
        let part = dataset.splits(&[split]);
        if part.is_empty() {
            continue;
        }
        let pred = model.predict(&part.images(image_size)?)?;
        scores.push((split, accuracy(&pred, &part.labels()?)));
    }
    let report = ClassifierReport {
        augment: cfg.augment,
        seed: cfg.seed,
        accuracy: scores,
        epoch_loss,
        step_batch,
        wall_time: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.to_checkpoint(cfg).save(&dir.join(format!("classifier_{}_seed{}.ckpt", cfg.augment, cfg.seed)))?;
    }
    Ok((model, report))
}
