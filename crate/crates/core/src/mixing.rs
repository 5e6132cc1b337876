//! Per-batch anatomy/characteristic mixing plans.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// One synthetic image: anatomy of sample `anatomy`, characteristic of patch
/// `patch` of sample `donor`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixEntry {
    pub anatomy: usize,
    pub donor: usize,
    pub patch: usize,
}

/// `N·M` entries, grouped by anatomy source (`M` consecutive entries each).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixPlan {
    entries: Vec<MixEntry>,
    batch: usize,
    mixes: usize,
    patches: usize,
}

impl MixPlan {
    /// Validate an explicit plan.
    pub fn from_entries(entries: Vec<MixEntry>, batch: usize, mixes: usize, patches: usize) -> Result<Self> {
        if entries.len() != batch * mixes {
            return Err(Error::Mixing(format!(
                "plan has {} entries, expected {batch}·{mixes}",
                entries.len()
            )));
        }
        for (k, e) in entries.iter().enumerate() {
            if e.anatomy != k / mixes || e.donor >= batch || e.donor == e.anatomy || e.patch >= patches {
                return Err(Error::Mixing(format!("invalid plan entry {k}: {e:?}")));
            }
        }
        Ok(MixPlan { entries, batch, mixes, patches })
    }

    pub fn entries(&self) -> &[MixEntry] {
        &self.entries
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn mixes(&self) -> usize {
        self.mixes
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn anatomy_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.anatomy).collect()
    }

    /// Row indices into a flattened `(N·P)×L/2` characteristic matrix.
    pub fn donor_rows(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.donor * self.patches + e.patch).collect()
    }
}

/// For each sample draw `mixes` donors uniformly among the other samples
/// (distinct while possible, with replacement once `mixes > batch − 1`),
/// each with an independent uniform patch index.
pub fn build_mix_plan(batch: usize, mixes: usize, patches: usize, rng: &mut impl Rng) -> Result<MixPlan> {
    if batch < 2 {
        return Err(Error::Mixing(format!(
            "mixing needs at least two samples per batch, got {batch}"
        )));
    }
    if mixes == 0 || patches == 0 {
        return Err(Error::Mixing("mixes and patches must be positive".into()));
    }
    let others = batch - 1;
    let mut entries = Vec::with_capacity(batch * mixes);
    for i in 0..batch {
        let skip = |r: usize| if r >= i { r + 1 } else { r };
        let donors: Vec<usize> = if mixes <= others {
            index::sample(rng, others, mixes).into_iter().map(skip).collect()
        } else {
            (0..mixes).map(|_| skip(rng.gen_range(0..others))).collect()
        };
        for donor in donors {
            entries.push(MixEntry { anatomy: i, donor, patch: rng.gen_range(0..patches) });
        }
    }
    Ok(MixPlan { entries, batch, mixes, patches })
}
