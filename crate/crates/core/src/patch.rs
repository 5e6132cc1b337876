//! Non-overlapping patch partition of `C×H×W` images.
//!
//! Patches are ordered row-major over the patch grid (left to right, then
//! top to bottom); checkpoints depend on this order.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Image and patch extents shared by every stage of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn new(channels: usize, height: usize, width: usize, patch: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || patch == 0 {
            return Err(Error::Geometry(format!(
                "all extents must be positive (C={channels}, H={height}, W={width}, PS={patch})"
            )));
        }
        if height % patch != 0 || width % patch != 0 {
            return Err(Error::Geometry(format!(
                "{height}×{width} image is not divisible into {patch}×{patch} patches"
            )));
        }
        Ok(PatchGeometry { channels, height, width, patch })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Flattened length of one patch, `C·PS·PS`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn split_shape(&self, batch: usize) -> [usize; 6] {
        let (gh, gw) = self.grid();
        [batch, self.channels, gh, self.patch, gw, self.patch]
    }

    fn patch_grid_shape(&self, batch: usize) -> [usize; 6] {
        let (gh, gw) = self.grid();
        [batch, gh, gw, self.channels, self.patch, self.patch]
    }

    fn batch_of_images(&self, shape: &[usize]) -> Result<usize> {
        match shape {
            [c, h, w] if [*c, *h, *w] == self.image_shape() => Ok(1),
            [b, c, h, w] if [*c, *h, *w] == self.image_shape() => Ok(*b),
            _ => Err(Error::Geometry(format!(
                "image shape {shape:?} does not match geometry {:?}",
                self.image_shape()
            ))),
        }
    }

    fn batch_of_patches(&self, shape: &[usize]) -> Result<usize> {
        let expect = [self.num_patches(), self.channels, self.patch, self.patch];
        match shape {
            s if s == expect => Ok(1),
            [b, rest @ ..] if rest == expect => Ok(*b),
            _ => Err(Error::Geometry(format!(
                "patch tensor {shape:?} does not match {expect:?}"
            ))),
        }
    }
}

// [B, C, gh, ps, gw, ps] -> [B, gh, gw, C, ps, ps]
const TO_PATCHES: [usize; 6] = [0, 2, 4, 1, 3, 5];
// [B, gh, gw, C, ps, ps] -> [B, C, gh, ps, gw, ps]
const TO_IMAGE: [usize; 6] = [0, 3, 1, 4, 2, 5];

/// `C×H×W → P×C×PS×PS` (or the batched `B×…` forms).
pub fn patchify<T: Real>(image: &Tensor<T>, geom: &PatchGeometry) -> Result<Tensor<T>> {
    let batched = image.rank() == 4;
    let b = geom.batch_of_images(image.shape())?;
    let p = image.clone().reshape(&geom.split_shape(b))?.permute(&TO_PATCHES)?;
    let (np, c, ps) = (geom.num_patches(), geom.channels, geom.patch);
    if batched {
        p.reshape(&[b, np, c, ps, ps])
    } else {
        p.reshape(&[np, c, ps, ps])
    }
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, geom: &PatchGeometry) -> Result<Tensor<T>> {
    let batched = patches.rank() == 5;
    let b = geom.batch_of_patches(patches.shape())?;
    let img = patches.clone().reshape(&geom.patch_grid_shape(b))?.permute(&TO_IMAGE)?;
    let [c, h, w] = geom.image_shape();
    if batched {
        img.reshape(&[b, c, h, w])
    } else {
        img.reshape(&[c, h, w])
    }
}

/// Differentiable `B×C×H×W → B×P×(C·PS·PS)`: the encoder's token layout.
pub fn patchify_var<'g, T: Real>(images: Var<'g, T>, geom: &PatchGeometry) -> Result<Var<'g, T>> {
    let b = geom.batch_of_images(&images.shape())?;
    images
        .reshape(&geom.split_shape(b))?
        .permute(&TO_PATCHES)?
        .reshape(&[b, geom.num_patches(), geom.patch_len()])
}

/// Differentiable `B×P×C×PS×PS` (or `B×P×(C·PS·PS)`) `→ B×C×H×W`.
pub fn unpatchify_var<'g, T: Real>(patches: Var<'g, T>, geom: &PatchGeometry) -> Result<Var<'g, T>> {
    let shape = patches.shape();
    let b = shape[0];
    if shape.iter().product::<usize>() != b * geom.num_patches() * geom.patch_len() {
        return Err(Error::Geometry(format!(
            "patch tensor {shape:?} inconsistent with geometry {geom:?}"
        )));
    }
    let [c, h, w] = geom.image_shape();
    patches
        .reshape(&geom.patch_grid_shape(b))?
        .permute(&TO_IMAGE)?
        .reshape(&[b, c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use proptest::prelude::*;

    #[test]
    fn patch_counts() {
        assert_eq!(PatchGeometry::new(3, 224, 224, 16).unwrap().num_patches(), 196);
        assert_eq!(PatchGeometry::new(3, 32, 32, 4).unwrap().num_patches(), 64);
        assert!(PatchGeometry::new(3, 30, 32, 4).is_err());
    }

    #[test]
    fn unit_patches_in_row_major_grid_order() {
        let g = PatchGeometry::new(1, 2, 2, 1).unwrap();
        let img = Tensor::<f64>::from_f64(&[1, 2, 2], &[0., 1., 2., 3.]).unwrap();
        let p = patchify(&img, &g).unwrap();
        assert_eq!(p.shape(), &[4, 1, 1, 1]);
        // (0,0), (0,1), (1,0), (1,1)
        assert_eq!(p.data(), &[0., 1., 2., 3.]);
    }

    #[test]
    fn patch_holds_its_spatial_block() {
        let g = PatchGeometry::new(1, 4, 4, 2).unwrap();
        let img = Tensor::<f64>::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &g).unwrap();
        // second patch: rows 0-1, cols 2-3
        assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
    }

    #[test]
    fn zero_patches_give_zero_image() {
        let g = PatchGeometry::new(3, 8, 8, 4).unwrap();
        let img = unpatchify(&Tensor::<f32>::zeros(&[4, 3, 4, 4]), &g).unwrap();
        assert_eq!(img.shape(), &[3, 8, 8]);
        assert!(img.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let g = PatchGeometry::new(3, 8, 8, 4).unwrap();
        assert!(patchify(&Tensor::<f32>::zeros(&[3, 8, 4]), &g).is_err());
        assert!(unpatchify(&Tensor::<f32>::zeros(&[3, 3, 4, 4]), &g).is_err());
    }

    #[test]
    fn swapping_patches_moves_only_those_blocks() {
        let g = PatchGeometry::new(2, 8, 8, 4).unwrap();
        let img = Tensor::<f64>::new(&[2, 8, 8], (0..128).map(f64::from).collect()).unwrap();
        let mut p = patchify(&img, &g).unwrap();
        let blk = 2 * 4 * 4;
        let (a, b) = (1, 2);
        for k in 0..blk {
            p.data_mut().swap(a * blk + k, b * blk + k);
        }
        let out = unpatchify(&p, &g).unwrap();
        for c in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let cell = (y / 4) * 2 + x / 4;
                    let src_cell = match cell {
                        1 => 2,
                        2 => 1,
                        other => other,
                    };
                    let (sy, sx) = ((src_cell / 2) * 4 + y % 4, (src_cell % 2) * 4 + x % 4);
                    assert_eq!(out.get(&[c, y, x]), img.get(&[c, sy, sx]));
                }
            }
        }
    }

    #[test]
    fn graph_forms_agree_with_tensor_forms() {
        let geom = PatchGeometry::new(3, 8, 8, 2).unwrap();
        let img = Tensor::<f64>::new(&[1, 3, 8, 8], (0..192).map(f64::from).collect()).unwrap();
        let g = Graph::new();
        let v = patchify_var(g.constant(img.clone()), &geom).unwrap();
        assert_eq!(v.value().data(), patchify(&img, &geom).unwrap().data());
        let back = unpatchify_var(v, &geom).unwrap();
        assert_eq!(back.value(), img);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(ps in prop::sample::select(vec![2usize, 4, 8]),
                               data in prop::collection::vec(0.0f64..1.0, 3 * 32 * 32)) {
            let g = PatchGeometry::new(3, 32, 32, ps).unwrap();
            let img = Tensor::new(&[3, 32, 32], data).unwrap();
            let p = patchify(&img, &g).unwrap();
            prop_assert_eq!(p.shape()[0], (32 / ps) * (32 / ps));
            prop_assert_eq!(&unpatchify(&p, &g).unwrap(), &img);
            prop_assert_eq!(patchify(&unpatchify(&p, &g).unwrap(), &g).unwrap(), p);
        }
    }
}
