//! Parameter-free image synthesizer.
//!
//! Each patch's anatomy half is read row-major as a `C×PS×V` stack and its
//! characteristic half as `C×V×PS`; their per-channel product is the
//! `PS×PS` pixel block. Output is linear; clamping happens only on export.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::patch::{unpatchify_var, PatchGeometry};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Shapes the synthesizer needs: patch geometry plus hidden dimension `V`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthGeometry {
    pub patch: PatchGeometry,
    pub hidden: usize,
}

impl SynthGeometry {
    pub fn new(patch: PatchGeometry, hidden: usize) -> Self {
        SynthGeometry { patch, hidden }
    }

    pub fn half(&self) -> usize {
        self.patch.channels * self.patch.patch * self.hidden
    }
}

impl<T: Real> Encoder<T> {
    pub fn synth_geometry(&self) -> SynthGeometry {
        let c = self.config();
        SynthGeometry::new(c.geometry().expect("validated config"), c.hidden_dim())
    }
}

/// `IS(z_a, z_c)`: `z_a` is `B×P×L/2`; `z_c` is `B×P×L/2` (own
/// characteristics) or `B×L/2` / `B×1×L/2` (one characteristic row used for
/// every patch). Returns `B×C×H×W`.
pub fn synthesize<'g, T: Real>(
    anatomy: Var<'g, T>,
    characteristic: Var<'g, T>,
    geom: &SynthGeometry,
) -> Result<Var<'g, T>> {
    let (np, half) = (geom.patch.num_patches(), geom.half());
    let (c, ps, v) = (geom.patch.channels, geom.patch.patch, geom.hidden);
    let a_shape = anatomy.shape();
    if a_shape.len() != 3 || a_shape[1] != np || a_shape[2] != half {
        return Err(Error::Shape(format!(
            "anatomy embeddings {a_shape:?} do not match [B, {np}, {half}]"
        )));
    }
    let b = a_shape[0];
    let c_shape = characteristic.shape();
    let characteristic = match c_shape.as_slice() {
        [cb, rows, h] if *cb == b && *h == half && *rows == np => characteristic,
        [cb, 1, h] if *cb == b && *h == half => characteristic.expand(1, np)?,
        [cb, h] if *cb == b && *h == half => characteristic.reshape(&[b, 1, half])?.expand(1, np)?,
        _ => {
            return Err(Error::Shape(format!(
                "characteristic embeddings {c_shape:?} must have 1 or {np} rows of width {half} for batch {b}"
            )))
        }
    };
    let za = anatomy.reshape(&[b * np * c, ps, v])?;
    let zc = characteristic.reshape(&[b * np * c, v, ps])?;
    let blocks = za.matmul(zc)?.reshape(&[b, np, c, ps, ps])?;
    unpatchify_var(blocks, &geom.patch)
}

/// Plain-tensor form of [`synthesize`] for unbatched inputs: `z_a` is
/// `P×L/2`, `z_c` is `P×L/2` or `1×L/2`. Returns `C×H×W`.
pub fn synthesize_tensor<T: Real>(
    anatomy: &Tensor<T>,
    characteristic: &Tensor<T>,
    geom: &SynthGeometry,
) -> Result<Tensor<T>> {
    let add_batch = |t: &Tensor<T>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshape(&s)
    };
    let g = Graph::new();
    let out = synthesize(g.constant(add_batch(anatomy)?), g.constant(add_batch(characteristic)?), geom)?;
    out.value().reshape(&geom.patch.image_shape())
}

/// `IS(split(E(x)))` for a batch `B×C×H×W`, inside an existing graph.
pub fn reconstruct_var<'g, T: Real>(
    encoder: &Encoder<T>,
    params: &crate::nn::Bound<'g, T>,
    images: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let emb = encoder.encode(params, images)?;
    synthesize(emb.anatomy, emb.characteristic, &encoder.synth_geometry())
}

/// Frozen self-reconstruction of `B×C×H×W` (or `C×H×W`) images.
pub fn reconstruct<T: Real>(encoder: &Encoder<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let unbatched = images.rank() == 3;
    let batch = if unbatched {
        let mut s = vec![1];
        s.extend_from_slice(images.shape());
        images.clone().reshape(&s)?
    } else {
        images.clone()
    };
    let g = Graph::new();
    let p = encoder.bind(&g, false);
    let out = reconstruct_var(encoder, &p, g.constant(batch))?.value();
    if unbatched {
        out.reshape(images.shape())
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{split, EncoderConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(c: usize, hw: usize, ps: usize, v: usize) -> SynthGeometry {
        SynthGeometry::new(PatchGeometry::new(c, hw, hw, ps).unwrap(), v)
    }

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_pixel_dot_product() {
        let g = geom(1, 1, 1, 2);
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let c = Tensor::<f64>::from_f64(&[1, 2], &[3., 4.]).unwrap();
        assert_eq!(synthesize_tensor(&a, &c, &g).unwrap().data(), &[11.0]);
    }

    #[test]
    fn hand_checked_block() {
        // C=1, PS=2, V=1: block = a (2×1) · c (1×2)
        let g = geom(1, 2, 2, 1);
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap();
        let c = Tensor::<f64>::from_f64(&[1, 2], &[3., 5.]).unwrap();
        assert_eq!(synthesize_tensor(&a, &c, &g).unwrap().data(), &[3., 5., 6., 10.]);
    }

    #[test]
    fn zero_characteristic_annihilates() {
        let g = geom(3, 8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[4, 24], &mut rng);
        let out = synthesize_tensor(&a, &Tensor::zeros(&[4, 24]), &g).unwrap();
        assert_eq!(out.shape(), &[3, 8, 8]);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn row_count_is_validated() {
        let g = geom(3, 8, 4, 2);
        let a = Tensor::<f64>::zeros(&[4, 24]);
        assert!(synthesize_tensor(&a, &Tensor::zeros(&[2, 24]), &g).is_err());
        assert!(synthesize_tensor(&a, &Tensor::zeros(&[4, 23]), &g).is_err());
    }

    #[test]
    fn bilinear_in_both_arguments() {
        let g = geom(3, 8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[4, 24], &mut rng);
        let c = random(&[4, 24], &mut rng);
        let base = synthesize_tensor(&a, &c, &g).unwrap();
        let alpha = 0.5; // power of two keeps scaling exact
        let sa = synthesize_tensor(&a.map(|x| x * alpha), &c, &g).unwrap();
        let sc = synthesize_tensor(&a, &c.map(|x| x * alpha), &g).unwrap();
        assert_eq!(sa, base.map(|x| x * alpha));
        assert_eq!(sc, base.map(|x| x * alpha));
    }

    #[test]
    fn broadcast_row_matches_explicit_tiling() {
        let g = geom(3, 8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&[4, 24], &mut rng);
        let c = random(&[4, 24], &mut rng);
        let row0 = Tensor::new(&[1, 24], c.row(0).to_vec()).unwrap();
        let tiled = Tensor::new(&[4, 24], c.row(0).repeat(4)).unwrap();
        assert_eq!(
            synthesize_tensor(&a, &row0, &g).unwrap(),
            synthesize_tensor(&a, &tiled, &g).unwrap()
        );
    }

    #[test]
    fn random_encoder_reconstruction_is_finite_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::<f32>::new(EncoderConfig::toy(), &mut rng).unwrap();
        let img = Tensor::new(&[3, 32, 32], (0..3072).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let r1 = reconstruct(&enc, &img).unwrap();
        assert_eq!(r1.shape(), &[3, 32, 32]);
        assert!(r1.all_finite());
        assert_eq!(r1, reconstruct(&enc, &img).unwrap());
        let z = enc.embed(&img).unwrap();
        let (a, c) = split(&z).unwrap();
        assert_eq!(synthesize_tensor(&a, &c, &enc.synth_geometry()).unwrap(), r1);
    }
}
