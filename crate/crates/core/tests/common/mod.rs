//! Shared helpers: finite-difference gradient checks and a loop-based
//! reference for the mixing losses.
#![allow(dead_code)]

pub mod suites;

use patchmix::encoder::{Encoder, EncoderConfig};
use patchmix::mixing::MixPlan;
use patchmix::rng::{stream, Stream};
use patchmix::{Graph, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn tiny_config() -> EncoderConfig {
    EncoderConfig { channels: 3, image_size: 8, patch_size: 4, embed_dim: 48, depth: 1, heads: 2, mlp_ratio: 2 }
}

pub fn tiny_encoder(seed: u64) -> Encoder<f64> {
    Encoder::new(tiny_config(), &mut stream(seed, Stream::Init)).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Stream::Eval);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinks such as ReLU.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = uniform(shape, 0.1, 1.0, seed);
    let mut rng = stream(seed ^ 0x5a5a, Stream::Eval);
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Reduce any output to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct coefficient.
pub fn weighted_sum<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let w = uniform(&y.shape(), -1.0, 1.0, seed ^ 0xfeed);
    y.mul(g.constant(w)).unwrap().sum()
}

/// Largest relative error between backprop and central differences over
/// the coordinates `pick(i)` of every input `i` (all coordinates when `None`).
pub fn max_grad_error<F>(inputs: &[Tensor<f64>], pick: Option<usize>, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect();
    drop(g);

    let eval = |inputs: &[Tensor<f64>]| {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    };
    let mut worst = 0f64;
    let mut rng = stream(99, Stream::Eval);
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match pick {
            Some(k) if k < t.len() => (0..k).map(|_| rng.gen_range(0..t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Reference losses computed with explicit loops from the embeddings
/// returned by `embed`, independent of the graph-based mixing code.
pub struct OracleLosses {
    pub anatomy: f64,
    pub characteristic: f64,
    pub reconstruction: f64,
}

/// One patch block: `out[c][i][j] = Σ_v a[c][i][v] · b[c][v][j]`, with the
/// anatomy half stored as `C×PS×V` and the characteristic half as `C×V×PS`.
pub fn synth_image(cfg: &EncoderConfig, anatomy: &[Vec<f64>], characteristic: &[&[f64]]) -> Vec<f64> {
    let (c, ps, s) = (cfg.channels, cfg.patch_size, cfg.image_size);
    let v = cfg.hidden_dim();
    let gw = s / ps;
    let mut img = vec![0.0; c * s * s];
    for (p, za) in anatomy.iter().enumerate() {
        let zc = characteristic[p];
        let (gy, gx) = (p / gw, p % gw);
        for ch in 0..c {
            for i in 0..ps {
                for j in 0..ps {
                    let mut acc = 0.0;
                    for k in 0..v {
                        acc += za[ch * ps * v + i * v + k] * zc[ch * v * ps + k * ps + j];
                    }
                    img[ch * s * s + (gy * ps + i) * s + gx * ps + j] = acc;
                }
            }
        }
    }
    img
}

fn rows(z: &Tensor<f64>, sample: usize, np: usize, l: usize) -> Vec<Vec<f64>> {
    (0..np).map(|p| z.data()[(sample * np + p) * l..(sample * np + p + 1) * l].to_vec()).collect()
}

pub fn oracle_losses(encoder: &Encoder<f64>, images: &Tensor<f64>, plan: &MixPlan) -> OracleLosses {
    let cfg = *encoder.config();
    let (np, l) = (cfg.num_patches(), cfg.embed_dim);
    let h = l / 2;
    let n = images.shape()[0];
    let z = encoder.embed(images).unwrap();

    let mut rec = 0.0;
    let sample_len = images.len() / n;
    for b in 0..n {
        let zs = rows(&z, b, np, l);
        let a: Vec<Vec<f64>> = zs.iter().map(|r| r[..h].to_vec()).collect();
        let c: Vec<&[f64]> = zs.iter().map(|r| &r[h..]).collect();
        let img = synth_image(&cfg, &a, &c);
        let x = &images.data()[b * sample_len..(b + 1) * sample_len];
        rec += x.iter().zip(&img).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    }

    let mut synthetic = Vec::new();
    let mut targets = Vec::new();
    for e in plan.entries() {
        let src = rows(&z, e.anatomy, np, l);
        let donor = rows(&z, e.donor, np, l);
        let a: Vec<Vec<f64>> = src.iter().map(|r| r[..h].to_vec()).collect();
        let zc = donor[e.patch][h..].to_vec();
        let c: Vec<&[f64]> = vec![&zc[..]; np];
        synthetic.extend(synth_image(&cfg, &a, &c));
        targets.push((a, zc.clone()));
    }
    let k = plan.len();
    let mut shape = images.shape().to_vec();
    shape[0] = k;
    let z2 = encoder.embed(&Tensor::new(&shape, synthetic).unwrap()).unwrap();
    let (mut la, mut lc) = (0.0, 0.0);
    for (m, (a, zc)) in targets.iter().enumerate() {
        for (p, row) in rows(&z2, m, np, l).iter().enumerate() {
            for d in 0..h {
                la += (a[p][d] - row[d]).powi(2);
                lc += (zc[d] - row[h + d]).powi(2);
            }
        }
    }
    let count = (k * np * h) as f64;
    OracleLosses { anatomy: la / count, characteristic: lc / count, reconstruction: rec / images.len() as f64 }
}
