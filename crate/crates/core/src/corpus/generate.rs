//! Procedural histology-like samples.
//!
//! A grayscale structure field `s ∈ [0, 1]` carries the class: sparse large
//! "nuclei" for label 0, dense small ones for label 1, over faint random
//! fibres. A domain then renders it as
//! `rgb = R_θ·(background + s·stain) + texture`, where `R_θ` is a hue
//! rotation about the gray axis and `texture` a fixed per-domain pattern.
//! Structure draws never consult the domain, so the two factors are
//! independent, and the rendering is affine in `s`, so it can be inverted.

use rand::Rng;

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;

/// Colour transform of one synthetic domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainStyle {
    /// Colour where `s = 0`.
    pub background: [f32; 3],
    /// Added per unit of `s`.
    pub stain: [f32; 3],
    /// Hue rotation in degrees.
    pub hue: f32,
    pub texture_amp: f32,
    pub texture_freq: [f32; 2],
}

/// Domains 0–2 are the training hospitals, 3 and 4 the OOD ones.
const DOMAINS: [DomainStyle; 5] = [
    DomainStyle {
        background: [0.90, 0.80, 0.88],
        stain: [-0.45, -0.60, -0.30],
        hue: 0.0,
        texture_amp: 0.015,
        texture_freq: [3.0, 1.0],
    },
    DomainStyle {
        background: [0.86, 0.74, 0.84],
        stain: [-0.50, -0.52, -0.22],
        hue: 14.0,
        texture_amp: 0.020,
        texture_freq: [1.0, 4.0],
    },
    DomainStyle {
        background: [0.92, 0.86, 0.90],
        stain: [-0.38, -0.55, -0.40],
        hue: -16.0,
        texture_amp: 0.012,
        texture_freq: [2.0, 3.0],
    },
    DomainStyle {
        background: [0.84, 0.82, 0.86],
        stain: [-0.40, -0.44, -0.48],
        hue: 48.0,
        texture_amp: 0.025,
        texture_freq: [5.0, 2.0],
    },
    DomainStyle {
        background: [0.80, 0.86, 0.78],
        stain: [-0.30, -0.52, -0.46],
        hue: 95.0,
        texture_amp: 0.030,
        texture_freq: [4.0, 5.0],
    },
];

pub fn domain_style(domain: usize) -> Result<&'static DomainStyle> {
    DOMAINS.get(domain).ok_or(Error::UnknownDomain(domain))
}

pub fn num_domains() -> usize {
    DOMAINS.len()
}

impl DomainStyle {
    /// The parameter vector used for the convex-hull check.
    pub fn params(&self) -> [f32; 8] {
        let [b0, b1, b2] = self.background;
        let [s0, s1, s2] = self.stain;
        [b0, b1, b2, s0, s1, s2, self.hue, self.texture_amp]
    }

    /// Rotation by `hue` degrees about the (1,1,1) axis.
    fn rotation(&self) -> [[f32; 3]; 3] {
        let t = self.hue.to_radians();
        let (c, s) = (t.cos(), t.sin());
        let k = (1.0 - c) / 3.0;
        let r = s / 3f32.sqrt();
        [[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]]
    }

    fn texture(&self, domain: usize, size: usize, x: usize, y: usize) -> f32 {
        let tau = std::f32::consts::TAU;
        let (fx, fy) = (self.texture_freq[0], self.texture_freq[1]);
        let u = (x as f32 * fx + y as f32 * fy) / size as f32;
        let wave = (tau * u + domain as f32).sin();
        // fixed integer hash: the same speckle for every sample of a domain
        let mut h = (x as u32).wrapping_mul(73_856_093) ^ (y as u32).wrapping_mul(19_349_663) ^ (domain as u32).wrapping_mul(83_492_791);
        h ^= h >> 13;
        h = h.wrapping_mul(0x5bd1_e995);
        h ^= h >> 15;
        let speckle = (h & 0xffff) as f32 / 65_535.0 - 0.5;
        self.texture_amp * (0.6 * wave + 0.8 * speckle)
    }

    /// Render a `size×size` structure field as a `3×size×size` image.
    pub fn render(&self, domain: usize, structure: &[f32], size: usize) -> Vec<f32> {
        let rot = self.rotation();
        let mut img = vec![0f32; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                let s = structure[i];
                let base: [f32; 3] = std::array::from_fn(|c| self.background[c] + s * self.stain[c]);
                let tex = self.texture(domain, size, x, y);
                for c in 0..3 {
                    let v = rot[c][0] * base[0] + rot[c][1] * base[1] + rot[c][2] * base[2] + tex;
                    img[c * size * size + i] = v.clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    /// Least-squares inverse of [`render`](Self::render) for unclamped pixels.
    pub fn recover_structure(&self, domain: usize, image: &[f32], size: usize) -> Vec<f32> {
        let rot = self.rotation();
        let n2: f32 = self.stain.iter().map(|a| a * a).sum();
        (0..size * size)
            .map(|i| {
                let (x, y) = (i % size, i / size);
                let tex = self.texture(domain, size, x, y);
                let v: [f32; 3] = std::array::from_fn(|c| image[c * size * size + i] - tex);
                // rotations are orthogonal: the inverse is the transpose
                let base: [f32; 3] = std::array::from_fn(|c| rot[0][c] * v[0] + rot[1][c] * v[1] + rot[2][c] * v[2]);
                (0..3).map(|c| (base[c] - self.background[c]) * self.stain[c]).sum::<f32>() / n2
            })
            .collect()
    }
}

/// Draw a class-bearing structure field.
pub fn generate_structure(label: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<f32>> {
    let (count, radius) = match label {
        0 => (rng.gen_range(4..=7), 2.8f32..4.0),
        1 => (rng.gen_range(14..=20), 1.3f32..2.0),
        other => return Err(Error::Config(format!("anatomy label {other} outside 0..{NUM_CLASSES}"))),
    };
    let scale = size as f32 / 32.0;
    let mut s = vec![0f32; size * size];
    // stroma: a faint oriented wave
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let freq: f32 = rng.gen_range(2.0..5.0) / size as f32;
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    for y in 0..size {
        for x in 0..size {
            let u = x as f32 * ct + y as f32 * st;
            s[y * size + x] = 0.08 * (1.0 + (std::f32::consts::TAU * freq * u + phase).sin());
        }
    }
    for _ in 0..count {
        let cx: f32 = rng.gen_range(0.0..size as f32);
        let cy: f32 = rng.gen_range(0.0..size as f32);
        let r = rng.gen_range(radius.clone()) * scale;
        let amp: f32 = rng.gen_range(0.7..1.0);
        let inv = 1.0 / (2.0 * r * r);
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
                let v = &mut s[y * size + x];
                *v = v.max(amp * (-d2 * inv).exp());
            }
        }
    }
    Ok(s)
}

/// Mean absolute finite-difference gradient of a structure field: dense
/// small nuclei produce more edges than sparse large ones.
pub fn structure_statistic(s: &[f32], size: usize) -> f64 {
    let mut acc = 0.0f64;
    for y in 0..size {
        for x in 0..size {
            let v = s[y * size + x];
            if x + 1 < size {
                acc += (s[y * size + x + 1] - v).abs() as f64;
            }
            if y + 1 < size {
                acc += (s[(y + 1) * size + x] - v).abs() as f64;
            }
        }
    }
    acc / (2 * size * (size - 1)) as f64
}

/// A rendered image with its factors.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    /// `3×size×size` planar, in `[0, 1]`.
    pub image: Vec<f32>,
    pub anatomy_label: usize,
    pub domain_id: usize,
    pub labeled: bool,
}

pub fn generate_sample(label: usize, domain: usize, size: usize, rng: &mut impl Rng) -> Result<DomainSample> {
    let style = domain_style(domain)?;
    let s = generate_structure(label, size, rng)?;
    Ok(DomainSample { image: style.render(domain, &s, size), anatomy_label: label, domain_id: domain, labeled: true })
}

/// Whether every held-out domain has a colour parameter outside the range
/// spanned by the training domains, which places it outside their hull.
pub fn outside_training_hull(train: &[usize], held_out: &[usize]) -> Result<bool> {
    let tp: Vec<[f32; 8]> = train.iter().map(|&d| domain_style(d).map(|s| s.params())).collect::<Result<_>>()?;
    for &d in held_out {
        let p = domain_style(d)?.params();
        let outside = (0..8).any(|k| {
            let lo = tp.iter().map(|q| q[k]).fold(f32::INFINITY, f32::min);
            let hi = tp.iter().map(|q| q[k]).fold(f32::NEG_INFINITY, f32::max);
            p[k] < lo || p[k] > hi
        });
        if !outside {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{indexed, Stream};

    #[test]
    fn same_structure_two_domains() {
        let s = generate_structure(1, 32, &mut indexed(5, Stream::Data, 0)).unwrap();
        let a = domain_style(0).unwrap().render(0, &s, 32);
        let b = domain_style(4).unwrap().render(4, &s, 32);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = |img: &[f32], c: usize| img[c * 1024..(c + 1) * 1024].iter().sum::<f32>() / 1024.0;
        assert!((0..3).any(|c| (mean(&a, c) - mean(&b, c)).abs() > 0.05));
        for (d, img) in [(0, &a), (4, &b)] {
            let back = domain_style(d).unwrap().recover_structure(d, img, 32);
            let err = back.iter().zip(&s).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(err < 1e-4, "domain {d}: structure error {err}");
        }
    }

    #[test]
    fn no_pixel_clips_for_any_domain() {
        for d in 0..num_domains() {
            let style = domain_style(d).unwrap();
            for s in [0.0, 1.0] {
                let field = vec![s; 32 * 32];
                let img = style.render(d, &field, 32);
                let back = style.recover_structure(d, &img, 32);
                assert!(back.iter().all(|v| (v - s).abs() < 1e-4), "domain {d} clips at s={s}");
            }
        }
    }

    #[test]
    fn unknown_domain_and_label() {
        let mut rng = indexed(0, Stream::Data, 0);
        assert!(matches!(generate_sample(0, 99, 32, &mut rng), Err(Error::UnknownDomain(99))));
        assert!(generate_sample(2, 0, 32, &mut rng).is_err());
    }

    #[test]
    fn held_out_domains_are_outside_the_hull() {
        assert!(outside_training_hull(&[0, 1, 2], &[3, 4]).unwrap());
        assert!(!outside_training_hull(&[0, 1, 2], &[1]).unwrap());
    }

    #[test]
    fn seeded_generation_replays() {
        let a = generate_sample(0, 2, 32, &mut indexed(9, Stream::Data, 3)).unwrap();
        let b = generate_sample(0, 2, 32, &mut indexed(9, Stream::Data, 3)).unwrap();
        assert_eq!(a, b);
    }
}
