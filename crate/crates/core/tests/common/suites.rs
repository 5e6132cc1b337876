//! Checks shared by the per-topic test files and the acceptance run.

use patchmix::corpus::generate_sample;
use patchmix::encoder::EncoderConfig;
use patchmix::loss::{
    anatomical_consistency_loss, characteristic_consistency_loss, mixed_forward, reconstruction_loss, total_loss,
    LossWeights,
};
use patchmix::mixing::build_mix_plan;
use patchmix::patch::{patchify, unpatchify, PatchGeometry};
use patchmix::rng::{indexed, stream, Stream};
use patchmix::synth::{synthesize_tensor, SynthGeometry};
use patchmix::train::{train_encoder, EncoderCheckpoint, TrainConfig, TrainOptions, TrainOutcome};
use patchmix::{Graph, Tensor, Var};
use rand::Rng;

use super::*;

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>>);

fn op_cases() -> Vec<Case> {
    let a = uniform(&[2, 3, 4], -1.0, 1.0, 1);
    let row = uniform(&[4], -1.0, 1.0, 2);
    let plane = uniform(&[3, 4], -1.0, 1.0, 3);
    let b = uniform(&[2, 4, 5], -1.0, 1.0, 31);
    let at = uniform(&[2, 4, 3], -1.0, 1.0, 32);
    let bt = uniform(&[2, 5, 4], -1.0, 1.0, 33);
    let nhwc = uniform(&[2, 5, 6, 3], -1.0, 1.0, 50);
    let mut cases: Vec<Case> = vec![
        ("add", vec![a.clone(), a.map(|v| v * 0.5)], Box::new(|g, v| weighted_sum(g, v[0].add(v[1]).unwrap(), 1))),
        ("add row", vec![a.clone(), row.clone()], Box::new(|g, v| weighted_sum(g, v[0].add(v[1]).unwrap(), 2))),
        ("sub", vec![a.clone(), a.map(|v| v * v)], Box::new(|g, v| weighted_sum(g, v[0].sub(v[1]).unwrap(), 3))),
        ("sub plane", vec![a.clone(), plane.clone()], Box::new(|g, v| weighted_sum(g, v[0].sub(v[1]).unwrap(), 4))),
        ("mul row", vec![a.clone(), row], Box::new(|g, v| weighted_sum(g, v[0].mul(v[1]).unwrap(), 5))),
        ("mul plane", vec![a.clone(), plane], Box::new(|g, v| weighted_sum(g, v[0].mul(v[1]).unwrap(), 6))),
        ("scale", vec![a.clone()], Box::new(|g, v| weighted_sum(g, v[0].scale(-2.5), 7))),
        ("square", vec![a.clone()], Box::new(|g, v| weighted_sum(g, v[0].square(), 8))),
        ("sqrt", vec![uniform(&[7], 0.2, 2.0, 9)], Box::new(|g, v| weighted_sum(g, v[0].sqrt(), 9))),
        ("exp", vec![a.clone()], Box::new(|g, v| weighted_sum(g, v[0].exp(), 10))),
        ("gelu", vec![uniform(&[3, 5], -3.0, 3.0, 11)], Box::new(|g, v| weighted_sum(g, v[0].gelu(), 11))),
        ("relu", vec![away_from_zero(&[3, 5], 12)], Box::new(|g, v| weighted_sum(g, v[0].relu(), 12))),
        ("sum", vec![a.clone()], Box::new(|_, v| v[0].square().sum())),
        ("mean", vec![a.clone()], Box::new(|_, v| v[0].exp().mean())),
        (
            "cross_entropy",
            vec![uniform(&[5, 3], -2.0, 2.0, 24)],
            Box::new(|_, v| v[0].cross_entropy(&[0, 2, 1, 1, 0]).unwrap()),
        ),
        ("matmul", vec![a.clone(), b.clone()], Box::new(|g, v| weighted_sum(g, v[0].matmul(v[1]).unwrap(), 30))),
        (
            "matmul ta",
            vec![at.clone(), b],
            Box::new(|g, v| weighted_sum(g, v[0].matmul_t(v[1], true, false).unwrap(), 31)),
        ),
        (
            "matmul tb",
            vec![a.clone(), bt.clone()],
            Box::new(|g, v| weighted_sum(g, v[0].matmul_t(v[1], false, true).unwrap(), 32)),
        ),
        ("matmul ta tb", vec![at, bt], Box::new(|g, v| weighted_sum(g, v[0].matmul_t(v[1], true, true).unwrap(), 33))),
        (
            "matmul shared",
            vec![a.clone(), uniform(&[4, 5], -1.0, 1.0, 34)],
            Box::new(|g, v| weighted_sum(g, v[0].matmul(v[1]).unwrap(), 34)),
        ),
        (
            "matmul shared tb",
            vec![a.clone(), uniform(&[5, 4], -1.0, 1.0, 35)],
            Box::new(|g, v| weighted_sum(g, v[0].matmul_t(v[1], false, true).unwrap(), 35)),
        ),
        ("reshape", vec![a.clone()], Box::new(|g, v| weighted_sum(g, v[0].reshape(&[6, 4]).unwrap().exp(), 40))),
        ("permute", vec![a.clone()], Box::new(|g, v| weighted_sum(g, v[0].permute(&[2, 0, 1]).unwrap(), 41))),
        ("narrow", vec![a.clone()], Box::new(|g, v| weighted_sum(g, v[0].narrow(2, 1, 2).unwrap().square(), 42))),
        (
            "index_select repeats",
            vec![a.clone()],
            Box::new(|g, v| weighted_sum(g, v[0].index_select(&[1, 0, 1, 1]).unwrap().square(), 43)),
        ),
        (
            "expand",
            vec![uniform(&[2, 1, 4], -1.0, 1.0, 44)],
            Box::new(|g, v| weighted_sum(g, v[0].expand(1, 3).unwrap(), 44)),
        ),
        (
            "concat",
            vec![a.clone(), uniform(&[2, 3, 2], -1.0, 1.0, 45)],
            Box::new(|g, v| weighted_sum(g, g.concat(&[v[0], v[1], v[0]], -1).unwrap().square(), 45)),
        ),
    ];
    for axis in [0isize, 1, 2] {
        cases.push(("mean_axis", vec![a.clone()], Box::new(move |g, v| weighted_sum(g, v[0].mean_axis(axis).unwrap(), 21))));
        cases.push(("softmax", vec![a.clone()], Box::new(move |g, v| weighted_sum(g, v[0].softmax(axis).unwrap(), 22))));
        cases.push((
            "layer_norm",
            vec![a.clone()],
            Box::new(move |g, v| weighted_sum(g, v[0].layer_norm(axis, 1e-5).unwrap(), 23)),
        ));
    }
    for (kernel, stride, pad) in [(3, 1, 1), (3, 2, 1), (2, 2, 0), (3, 2, 0)] {
        cases.push((
            "im2col",
            vec![nhwc.clone()],
            Box::new(move |g, v| weighted_sum(g, v[0].im2col(kernel, stride, pad).unwrap(), 50)),
        ));
    }
    cases
}

/// Worst relative gradient error of every differentiable op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    op_cases().into_iter().map(|(name, inputs, f)| (name, max_grad_error(&inputs, None, f))).collect()
}

/// Worst relative gradient error of the weighted total loss with respect to
/// a sample of encoder parameters (three coordinates per tensor).
pub fn end_to_end_gradient_error() -> f64 {
    let mut encoder = tiny_encoder(3);
    let images = uniform(&[3, 3, 8, 8], 0.0, 1.0, 60);
    let plan = build_mix_plan(3, 2, encoder.config().num_patches(), &mut stream(3, Stream::Mixing)).unwrap();
    let weights = LossWeights::new(1.0, 0.7, 1.3).unwrap();

    let analytic = {
        let g = Graph::new();
        let p = encoder.bind(&g, true);
        let fwd = mixed_forward(&encoder, &p, g.constant(images.clone()), &plan).unwrap();
        let (total, _) = fwd.objective(&weights).unwrap();
        g.backward(total).unwrap();
        p.grads()
    };

    let mut rng = stream(61, Stream::Eval);
    let mut worst = 0f64;
    for i in 0..encoder.params().len() {
        let n = encoder.params().get(i).len();
        for _ in 0..3.min(n) {
            let j = rng.gen_range(0..n);
            let original = encoder.params().get(i).data()[j];
            let mut at = |delta: f64| {
                encoder.params_mut().get_mut(i).data_mut()[j] = original + delta;
                total_loss(&encoder, &images, &plan, &weights).unwrap().total
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            encoder.params_mut().get_mut(i).data_mut()[j] = original;
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

pub const PATCH_SIZES: [usize; 5] = [1, 2, 4, 8, 16];

/// Integer-valued data keeps every product and sum exact in f64.
fn integer_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Stream::Eval);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-8i32..=8) as f64).collect()).unwrap()
}

/// Bit-exact patchify round trips for every patch size.
pub fn patch_round_trips() -> bool {
    PATCH_SIZES.iter().all(|&ps| {
        let s = 2 * ps.max(2);
        let geom = PatchGeometry::new(3, s, s, ps).unwrap();
        let x = uniform(&[2, 3, s, s], -1.0, 1.0, ps as u64);
        unpatchify(&patchify(&x, &geom).unwrap(), &geom).unwrap() == x
    })
}

/// `IS(s·a₁ + t·a₂, c) = s·IS(a₁, c) + t·IS(a₂, c)` and likewise in `c`,
/// compared for exact equality on integer data.
pub fn synthesizer_bilinear(seed: u64) -> bool {
    let geom = SynthGeometry::new(PatchGeometry::new(3, 8, 8, 4).unwrap(), 2);
    let is = |a: &Tensor<f64>, c: &Tensor<f64>| synthesize_tensor(a, c, &geom).unwrap();
    let (a1, a2) = (integer_tensor(&[4, 24], seed), integer_tensor(&[4, 24], seed + 1));
    let (c1, c2) = (integer_tensor(&[1, 24], seed + 2), integer_tensor(&[1, 24], seed + 3));
    let (s, t) = (3.0, -2.0);
    let combo = |x: &Tensor<f64>, y: &Tensor<f64>| {
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| s * p + t * q).collect()).unwrap()
    };
    is(&combo(&a1, &a2), &c1) == combo(&is(&a1, &c1), &is(&a2, &c1))
        && is(&a1, &combo(&c1, &c2)) == combo(&is(&a1, &c1), &is(&a1, &c2))
}

pub fn reshape_round_trips() -> bool {
    let x = uniform(&[2, 3, 4, 5], -1.0, 1.0, 70);
    let y = x.clone().reshape(&[6, 20]).unwrap().reshape(&[120]).unwrap().reshape(&[2, 3, 4, 5]).unwrap();
    y == x
}

pub struct OracleAgreement {
    /// Largest relative gap between a module loss and its loop reference.
    pub max_discrepancy: f64,
    pub identity_holds: bool,
}

pub fn loss_oracle_agreement() -> OracleAgreement {
    let mut max_discrepancy = 0f64;
    let mut identity_holds = true;
    for (seed, batch, mixes) in [(0u64, 2, 1), (1, 3, 2), (2, 4, 5)] {
        let encoder = tiny_encoder(seed);
        let images = uniform(&[batch, 3, 8, 8], 0.0, 1.0, seed + 100);
        let plan = build_mix_plan(batch, mixes, encoder.config().num_patches(), &mut stream(seed, Stream::Mixing)).unwrap();
        let oracle = oracle_losses(&encoder, &images, &plan);
        let w = LossWeights::new(0.5, 2.0, 1.5).unwrap();
        let report = total_loss(&encoder, &images, &plan, &w).unwrap();
        identity_holds &= report.identity_holds(&w);
        let expect_total = 0.5 * oracle.anatomy + 2.0 * oracle.characteristic + 1.5 * oracle.reconstruction;
        for (got, want) in [
            (anatomical_consistency_loss(&encoder, &images, &plan).unwrap(), oracle.anatomy),
            (characteristic_consistency_loss(&encoder, &images, &plan).unwrap(), oracle.characteristic),
            (reconstruction_loss(&encoder, &images).unwrap(), oracle.reconstruction),
            (report.total, expect_total),
        ] {
            max_discrepancy = max_discrepancy.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    OracleAgreement { max_discrepancy, identity_holds }
}

pub const SMOKE_SIZE: usize = 16;

pub fn smoke_encoder() -> EncoderConfig {
    EncoderConfig { channels: 3, image_size: SMOKE_SIZE, patch_size: 4, embed_dim: 48, depth: 2, heads: 2, mlp_ratio: 2 }
}

pub fn smoke_images(n: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(n * 3 * SMOKE_SIZE * SMOKE_SIZE);
    for i in 0..n {
        let s = generate_sample(i % 2, i % 3, SMOKE_SIZE, &mut indexed(11, Stream::Data, i as u64)).unwrap();
        data.extend(s.image);
    }
    Tensor::new(&[n, 3, SMOKE_SIZE, SMOKE_SIZE], data).unwrap()
}

pub fn smoke_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch: 8, mixes: 2, lr: 3e-3, seed: 3, ..TrainConfig::default() }
}

pub fn smoke_run(images: &Tensor<f32>, cfg: &TrainConfig, opts: TrainOptions<'_>) -> TrainOutcome {
    train_encoder(images, smoke_encoder(), cfg, opts).unwrap()
}

/// Fractional drop of `L_total` from the first to the last step.
pub fn loss_drop(out: &TrainOutcome) -> f64 {
    let first = out.steps[0].total as f64;
    1.0 - out.steps.last().unwrap().total as f64 / first
}

pub fn replay_matches(images: &Tensor<f32>, cfg: &TrainConfig) -> bool {
    let a = smoke_run(images, cfg, TrainOptions::default());
    let b = smoke_run(images, cfg, TrainOptions::default());
    a.checkpoint.encoder.params() == b.checkpoint.encoder.params() && a.steps == b.steps
}

/// Stop after one epoch, reload `last.ckpt`, finish, and compare with an
/// uninterrupted run: parameters, optimizer moments and every step loss.
pub fn resume_matches(images: &Tensor<f32>, cfg: &TrainConfig, dir: &std::path::Path) -> bool {
    let full = smoke_run(images, cfg, TrainOptions::default());
    let first = smoke_run(images, cfg, TrainOptions { out_dir: Some(dir.into()), stop_after: Some(1), ..Default::default() });
    let saved = EncoderCheckpoint::load(&dir.join("last.ckpt"), None).unwrap();
    let rest = smoke_run(images, cfg, TrainOptions { out_dir: Some(dir.into()), resume: Some(saved), ..Default::default() });
    let stitched: Vec<_> = first.steps.iter().chain(&rest.steps).copied().collect();
    rest.checkpoint.encoder.params() == full.checkpoint.encoder.params()
        && rest.checkpoint.optimizer.moments() == full.checkpoint.optimizer.moments()
        && stitched == full.steps
}
