//! The three-term self-supervised objective.
//!
//! Every squared norm is normalized by its element count, so each term is a
//! plain per-element mean squared error:
//!
//! * anatomical consistency: anatomy halves of the original embeddings vs.
//!   the re-encoded synthetic images, averaged over all `N·M` mixes;
//! * characteristic consistency: the donor patch's characteristic row vs.
//!   every patch row of the re-encoded synthetic image;
//! * self-reconstruction: the image vs. `IS(z_a, z_c)` of its own halves.
//!
//! Gradients flow through both encoder passes.

use std::fmt;

use crate::encoder::{Encoder, PatchEmbeddings};
use crate::error::{Error, Result};
use crate::mixing::MixPlan;
use crate::nn::Bound;
use crate::synth::synthesize;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub anatomy: f64,
    pub characteristic: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { anatomy: 1.0, characteristic: 1.0, reconstruction: 1.0 }
    }
}

impl LossWeights {
    pub fn new(anatomy: f64, characteristic: f64, reconstruction: f64) -> Result<Self> {
        let w = LossWeights { anatomy, characteristic, reconstruction };
        if [anatomy, characteristic, reconstruction].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {w:?}")));
        }
        Ok(w)
    }

    /// `λa·a + λc·c + λr·r`, evaluated in `T` in the same order as the graph.
    pub fn combine<T: Real>(&self, a: T, c: T, r: T) -> T {
        a * T::lit(self.anatomy) + c * T::lit(self.characteristic) + r * T::lit(self.reconstruction)
    }
}

/// Scalar values of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<T> {
    pub anatomy: T,
    pub characteristic: T,
    pub reconstruction: T,
    pub total: T,
}

impl<T: Real> LossReport<T> {
    pub fn is_finite(&self) -> bool {
        [self.anatomy, self.characteristic, self.reconstruction, self.total]
            .iter()
            .all(|x| x.is_finite())
    }

    /// Whether `total` equals the weighted component sum bit for bit.
    pub fn identity_holds(&self, w: &LossWeights) -> bool {
        w.combine(self.anatomy, self.characteristic, self.reconstruction) == self.total
    }
}

impl<T: Real> fmt::Display for LossReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "anatomy={:.6} characteristic={:.6} reconstruction={:.6} total={:.6}",
            self.anatomy, self.characteristic, self.reconstruction, self.total
        )
    }
}

/// Everything the objective needs from one batch: the first encoding, the
/// self-reconstruction, the mixed synthetic images and their re-encoding.
pub struct MixedForward<'g, T: Real> {
    pub images: Var<'g, T>,
    pub embeddings: PatchEmbeddings<'g, T>,
    pub reconstruction: Var<'g, T>,
    /// `N·M × P × L/2` anatomy rows of each entry's anatomy source.
    pub mixed_anatomy: Var<'g, T>,
    /// `N·M × L/2` donor characteristic rows.
    pub donor_characteristic: Var<'g, T>,
    pub synthetic: Var<'g, T>,
    pub resynthesized: PatchEmbeddings<'g, T>,
}

pub fn mixed_forward<'g, T: Real>(
    encoder: &Encoder<T>,
    params: &Bound<'g, T>,
    images: Var<'g, T>,
    plan: &MixPlan,
) -> Result<MixedForward<'g, T>> {
    let cfg = encoder.config();
    let (np, half) = (cfg.num_patches(), cfg.half());
    let n = images.shape()[0];
    if plan.batch() != n || plan.patches() != np {
        return Err(Error::Mixing(format!(
            "plan for batch {} / {} patches applied to batch {n} / {np} patches",
            plan.batch(),
            plan.patches()
        )));
    }
    let geom = encoder.synth_geometry();
    let embeddings = encoder.encode(params, images)?;
    let reconstruction = synthesize(embeddings.anatomy, embeddings.characteristic, &geom)?;

    let mixed_anatomy = embeddings.anatomy.index_select(&plan.anatomy_indices())?;
    let donor_characteristic = embeddings
        .characteristic
        .reshape(&[n * np, half])?
        .index_select(&plan.donor_rows())?;
    let synthetic = synthesize(mixed_anatomy, donor_characteristic, &geom)?;
    let resynthesized = encoder.encode(params, synthetic)?;
    Ok(MixedForward {
        images,
        embeddings,
        reconstruction,
        mixed_anatomy,
        donor_characteristic,
        synthetic,
        resynthesized,
    })
}

fn mse<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(a.sub(b)?.square().mean())
}

impl<'g, T: Real> MixedForward<'g, T> {
    pub fn anatomical_consistency(&self) -> Result<Var<'g, T>> {
        mse(self.mixed_anatomy, self.resynthesized.anatomy)
    }

    pub fn characteristic_consistency(&self) -> Result<Var<'g, T>> {
        let s = self.resynthesized.characteristic.shape();
        let donor = self
            .donor_characteristic
            .reshape(&[s[0], 1, s[2]])?
            .expand(1, s[1])?;
        mse(donor, self.resynthesized.characteristic)
    }

    pub fn reconstruction_error(&self) -> Result<Var<'g, T>> {
        mse(self.images, self.reconstruction)
    }

    /// Weighted sum plus the scalar report.
    pub fn objective(&self, w: &LossWeights) -> Result<(Var<'g, T>, LossReport<T>)> {
        let a = self.anatomical_consistency()?;
        let c = self.characteristic_consistency()?;
        let r = self.reconstruction_error()?;
        let total = a
            .scale(T::lit(w.anatomy))
            .add(c.scale(T::lit(w.characteristic)))?
            .add(r.scale(T::lit(w.reconstruction)))?;
        let report = LossReport {
            anatomy: a.item(),
            characteristic: c.item(),
            reconstruction: r.item(),
            total: total.item(),
        };
        Ok((total, report))
    }
}

fn frozen<T: Real>(
    encoder: &Encoder<T>,
    images: &Tensor<T>,
    plan: &MixPlan,
    pick: impl for<'g> FnOnce(&MixedForward<'g, T>) -> Result<Var<'g, T>>,
) -> Result<T> {
    let g = Graph::new();
    let p = encoder.bind(&g, false);
    let fwd = mixed_forward(encoder, &p, g.constant(images.clone()), plan)?;
    Ok(pick(&fwd)?.item())
}

/// Anatomical consistency of a frozen encoder on `N×C×H×W` images.
pub fn anatomical_consistency_loss<T: Real>(encoder: &Encoder<T>, images: &Tensor<T>, plan: &MixPlan) -> Result<T> {
    frozen(encoder, images, plan, |f| f.anatomical_consistency())
}

pub fn characteristic_consistency_loss<T: Real>(
    encoder: &Encoder<T>,
    images: &Tensor<T>,
    plan: &MixPlan,
) -> Result<T> {
    frozen(encoder, images, plan, |f| f.characteristic_consistency())
}

/// Self-reconstruction error; needs no mixing plan.
pub fn reconstruction_loss<T: Real>(encoder: &Encoder<T>, images: &Tensor<T>) -> Result<T> {
    let g = Graph::new();
    let p = encoder.bind(&g, false);
    let x = g.constant(images.clone());
    let r = crate::synth::reconstruct_var(encoder, &p, x)?;
    Ok(mse(x, r)?.item())
}

pub fn total_loss<T: Real>(
    encoder: &Encoder<T>,
    images: &Tensor<T>,
    plan: &MixPlan,
    weights: &LossWeights,
) -> Result<LossReport<T>> {
    let g = Graph::new();
    let p = encoder.bind(&g, false);
    let fwd = mixed_forward(encoder, &p, g.constant(images.clone()), plan)?;
    Ok(fwd.objective(weights)?.1)
}
