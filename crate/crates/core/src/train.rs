//! Encoder training: shuffled batches, fresh mixing plans every step, AdamW
//! under a per-step cosine schedule, per-epoch loss CSV and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::{mixed_forward, LossReport, LossWeights};
use crate::mixing::build_mix_plan;
use crate::nn::ParamSet;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::{self, RngState, Stream};
use crate::tensor::{Graph, Tensor};

pub const LOSS_CSV_HEADER: &str = "epoch,L_C_a,L_C_c,L_R,L_total,lr,wall_time";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub mixes: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub adamw: AdamWConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch: 16,
            mixes: 4,
            lr: 1e-3,
            lr_min: 0.0,
            adamw: AdamWConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch < 2 || self.mixes == 0 {
            return Err(Error::Config(format!(
                "need epochs ≥ 1, batch ≥ 2 and mixes ≥ 1 (got {}, {}, {})",
                self.epochs, self.batch, self.mixes
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=self.lr).contains(&self.lr_min) {
            return Err(Error::Config(format!("invalid learning rates lr={} lr_min={}", self.lr, self.lr_min)));
        }
        let a = self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid AdamW settings {a:?}")));
        }
        LossWeights::new(self.weights.anatomy, self.weights.characteristic, self.weights.reconstruction)?;
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("mixes", self.mixes.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("beta1", self.adamw.beta1.to_string()),
            ("beta2", self.adamw.beta2.to_string()),
            ("eps", self.adamw.eps.to_string()),
            ("weight_decay", self.adamw.weight_decay.to_string()),
            ("lambda_a", self.weights.anatomy.to_string()),
            ("lambda_c", self.weights.characteristic.to_string()),
            ("lambda_r", self.weights.reconstruction.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_pairs(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        fn num<V: std::str::FromStr>(get: &dyn Fn(&str) -> Option<String>, k: &str) -> Result<V> {
            let raw = get(k).ok_or_else(|| Error::Config(format!("missing `{k}`")))?;
            raw.parse().map_err(|_| Error::Config(format!("`{k}={raw}` is malformed")))
        }
        let cfg = TrainConfig {
            epochs: num(&get, "epochs")?,
            batch: num(&get, "batch")?,
            mixes: num(&get, "mixes")?,
            lr: num(&get, "lr")?,
            lr_min: num(&get, "lr_min")?,
            adamw: AdamWConfig {
                beta1: num(&get, "beta1")?,
                beta2: num(&get, "beta2")?,
                eps: num(&get, "eps")?,
                weight_decay: num(&get, "weight_decay")?,
            },
            weights: LossWeights {
                anatomy: num(&get, "lambda_a")?,
                characteristic: num(&get, "lambda_c")?,
                reconstruction: num(&get, "lambda_r")?,
            },
            seed: num(&get, "seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Progress counters carried across a resume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    /// Cumulative training seconds.
    pub wall_time: f64,
    pub best_total: f64,
    pub mixing: RngState,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct EncoderCheckpoint {
    pub encoder: Encoder<f32>,
    pub train: TrainConfig,
    pub optimizer: AdamW<f32>,
    pub state: TrainState,
}

impl EncoderCheckpoint {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", "encoder");
        for (k, v) in self.encoder.config().to_pairs() {
            ck.set(format!("encoder.{k}"), v);
        }
        for (k, v) in self.train.to_pairs() {
            ck.set(format!("train.{k}"), v);
        }
        let s = &self.state;
        ck.set("state.epoch", s.epoch);
        ck.set("state.step", s.step);
        ck.set("state.wall_time", s.wall_time);
        ck.set("state.best_total", s.best_total);
        ck.set("state.rng_root", s.mixing.root);
        ck.set("state.rng_stream", s.mixing.stream);
        ck.set("state.rng_word_pos", s.mixing.word_pos);
        ck.set("adam.step", self.optimizer.steps());
        let (m, v) = self.optimizer.moments();
        for (i, (name, t)) in self.encoder.params().iter().enumerate() {
            ck.push_block(format!("param/{name}"), t.clone());
            ck.push_block(format!("adam.m/{name}"), Tensor::raw(t.shape().to_vec(), m[i].clone()));
            ck.push_block(format!("adam.v/{name}"), Tensor::raw(t.shape().to_vec(), v[i].clone()));
        }
        ck
    }

    /// Decode; with `expect`, the stored geometry must match it exactly.
    pub fn from_checkpoint(ck: &Checkpoint, expect: Option<&EncoderConfig>) -> Result<Self> {
        if ck.get("kind") != Some("encoder") {
            return Err(Error::Config(format!("not an encoder checkpoint (kind={:?})", ck.get("kind"))));
        }
        let config = EncoderConfig::from_pairs(|k| ck.get(&format!("encoder.{k}")).map(str::to_string))?;
        if let Some(want) = expect {
            if want != &config {
                return Err(Error::Config(format!(
                    "checkpoint geometry {config:?} does not match the requested {want:?}"
                )));
            }
        }
        let train = TrainConfig::from_pairs(|k| ck.get(&format!("train.{k}")).map(str::to_string))?;
        let skeleton = Encoder::<f32>::new(config, &mut rng::stream(0, Stream::Init))?;
        let mut params = ParamSet::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, _) in skeleton.params().iter() {
            let get = |kind: &str| {
                ck.block(&format!("{kind}/{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks block {kind}/{name}")))
            };
            params.push(name, get("param")?);
            m.push(get("adam.m")?.into_data());
            v.push(get("adam.v")?.into_data());
        }
        let encoder = Encoder::from_params(config, &params)?;
        let optimizer = AdamW::from_state(train.adamw, encoder.params(), ck.parse("adam.step")?, m, v)?;
        let state = TrainState {
            epoch: ck.parse("state.epoch")?,
            step: ck.parse("state.step")?,
            wall_time: ck.parse("state.wall_time")?,
            best_total: ck.parse("state.best_total")?,
            mixing: RngState {
                root: ck.parse("state.rng_root")?,
                stream: ck.parse("state.rng_stream")?,
                word_pos: ck.parse("state.rng_word_pos")?,
            },
        };
        Ok(EncoderCheckpoint { encoder, train, optimizer, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path, expect: Option<&EncoderConfig>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck, expect).map_err(|e| match e {
            Error::Config(reason) => Error::Config(format!("{}: {reason}", path.display())),
            other => other,
        })
    }
}

/// Epoch-mean losses, the learning rate of the epoch's last step and the
/// cumulative wall time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub anatomy: f64,
    pub characteristic: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8e},{:.3}",
            self.epoch, self.anatomy, self.characteristic, self.reconstruction, self.total, self.lr, self.wall_time
        )
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where `loss.csv` and the checkpoints go; nothing is written without it.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint instead of a fresh initialization.
    pub resume: Option<EncoderCheckpoint>,
    /// Stop once this many epochs are complete (the schedule still spans
    /// the configured horizon).
    pub stop_after: Option<usize>,
    pub on_epoch: Option<&'a dyn Fn(&EpochRecord)>,
}

pub struct TrainOutcome {
    pub checkpoint: EncoderCheckpoint,
    pub epochs: Vec<EpochRecord>,
    /// Every step's loss, in order.
    pub steps: Vec<LossReport<f32>>,
}

pub fn steps_per_epoch(samples: usize, batch: usize) -> usize {
    samples / batch.min(samples).max(1)
}

/// Train `E` on `N×C×H×W` images in `[0, 1]`; labels never enter.
pub fn train_encoder(
    images: &Tensor<f32>,
    encoder_config: EncoderConfig,
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    encoder_config.validate()?;
    let geom = encoder_config.geometry()?;
    let n = images.shape()[0];
    if images.shape()[1..] != geom.image_shape() {
        return Err(Error::Config(format!(
            "images {:?} do not match encoder geometry {:?}",
            images.shape(),
            geom.image_shape()
        )));
    }
    let batch = cfg.batch.min(n);
    if batch < 2 {
        return Err(Error::Config(format!("training needs at least 2 images, got {n}")));
    }
    let per_epoch = steps_per_epoch(n, batch);
    let total_steps = per_epoch * cfg.epochs;
    let sample_len = images.len() / n;

    let (mut encoder, mut opt, mut state) = match opts.resume {
        Some(ck) => {
            if ck.encoder.config() != &encoder_config || ck.train != *cfg {
                return Err(Error::Config("resume checkpoint was trained with a different configuration".into()));
            }
            (ck.encoder, ck.optimizer, ck.state)
        }
        None => {
            let encoder = Encoder::new(encoder_config, &mut rng::stream(cfg.seed, Stream::Init))?;
            let opt = AdamW::new(cfg.adamw, encoder.params());
            let mixing = RngState::capture(cfg.seed, &rng::stream(cfg.seed, Stream::Mixing));
            (encoder, opt, TrainState { epoch: 0, step: 0, wall_time: 0.0, best_total: f64::INFINITY, mixing })
        }
    };
    let mut mix_rng = state.mixing.restore();
    let stop = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);

    let csv_path = opts.out_dir.as_ref().map(|d| d.join("loss.csv"));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = csv_path.as_ref().unwrap();
        if state.epoch == 0 || !path.exists() {
            fs::write(path, format!("{LOSS_CSV_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        }
    }

    let mut records = Vec::new();
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut buf = vec![0f32; batch * sample_len];
    while state.epoch < stop {
        let started = Instant::now();
        let epoch = state.epoch;
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.shuffle(&mut rng::indexed(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut sums = [0f64; 4];
        let mut lr = cfg.lr;
        for s in 0..per_epoch {
            for (k, &idx) in order[s * batch..(s + 1) * batch].iter().enumerate() {
                buf[k * sample_len..(k + 1) * sample_len]
                    .copy_from_slice(&images.data()[idx * sample_len..(idx + 1) * sample_len]);
            }
            let mut shape = vec![batch];
            shape.extend(geom.image_shape());
            let x = Tensor::raw(shape, buf.clone());
            lr = cosine_lr(state.step, total_steps, cfg.lr, cfg.lr_min)?;

            let g = Graph::new();
            let p = encoder.bind(&g, true);
            let plan = build_mix_plan(batch, cfg.mixes, encoder_config.num_patches(), &mut mix_rng)?;
            let fwd = mixed_forward(&encoder, &p, g.constant(x), &plan)?;
            let (loss, report) = fwd.objective(&cfg.weights)?;
            if !report.is_finite() {
                return Err(Error::NonFinite { epoch, step: state.step, detail: report.to_string() });
            }
            g.backward(loss)?;
            let grads = p.grads();
            drop(fwd);
            drop(g);
            opt.step(encoder.params_mut(), &grads, lr)?;

            for (acc, v) in sums.iter_mut().zip([report.anatomy, report.characteristic, report.reconstruction, report.total]) {
                *acc += v as f64;
            }
            steps.push(report);
            state.step += 1;
        }
        state.epoch += 1;
        state.wall_time += started.elapsed().as_secs_f64();
        state.mixing = RngState::capture(cfg.seed, &mix_rng);
        let k = per_epoch as f64;
        let rec = EpochRecord {
            epoch: state.epoch,
            anatomy: sums[0] / k,
            characteristic: sums[1] / k,
            reconstruction: sums[2] / k,
            total: sums[3] / k,
            lr,
            wall_time: state.wall_time,
        };
        let improved = rec.total < state.best_total;
        if improved {
            state.best_total = rec.total;
        }
        let ck = EncoderCheckpoint { encoder: encoder.clone(), train: *cfg, optimizer: opt.clone(), state };
        if let Some(dir) = &opts.out_dir {
            let path = csv_path.as_ref().unwrap();
            let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", rec.csv_row()).map_err(|e| Error::io(path, e))?;
            ck.save(&dir.join("last.ckpt"))?;
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
            if state.epoch == cfg.epochs {
                ck.save(&dir.join("final.ckpt"))?;
            }
        }
        if let Some(cb) = opts.on_epoch {
            cb(&rec);
        }
        records.push(rec);
    }
    let checkpoint = EncoderCheckpoint { encoder, train: *cfg, optimizer: opt, state };
    Ok(TrainOutcome { checkpoint, epochs: records, steps })
}
