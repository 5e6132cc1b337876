//! Reconstruction metrics, mixing grids, the downstream classifier and the
//! scalability experiments.

pub mod classifier;
pub mod grid;
pub mod metrics;
pub mod scale;

use crate::encoder::Encoder;
use crate::error::Result;
use crate::mixing::MixPlan;
use crate::synth::synthesize;
use crate::tensor::{Graph, Tensor};

pub use metrics::{eval_reconstruction, psnr, MetricReport};

/// Synthetic images of a frozen encoder: entry `k` of `plan` combines the
/// anatomy of its source with one patch characteristic of its donor.
/// Returns `N·M×C×H×W`.
pub fn synthesize_mixes(encoder: &Encoder<f32>, images: &Tensor<f32>, plan: &MixPlan) -> Result<Tensor<f32>> {
    let g = Graph::new();
    let p = encoder.bind(&g, false);
    let emb = encoder.encode(&p, g.constant(images.clone()))?;
    let (n, np, half) = (images.shape()[0], encoder.config().num_patches(), encoder.config().half());
    let anatomy = emb.anatomy.index_select(&plan.anatomy_indices())?;
    let donor = emb.characteristic.reshape(&[n * np, half])?.index_select(&plan.donor_rows())?;
    Ok(synthesize(anatomy, donor, &encoder.synth_geometry())?.value())
}
