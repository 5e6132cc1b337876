//! Mixing grids: donors down the side, anatomy sources across the top.

use std::path::Path;

use rand::Rng;

use crate::corpus::ppm;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::synth::synthesize;
use crate::tensor::{Graph, Tensor};

/// A rendered grid. Row 0 holds the anatomy sources and column 0 the donors;
/// cell `(r, c)` for `r, c ≥ 1` is source `c-1` with donor `r-1`'s
/// characteristic taken from patch `donor_patches[r-1]`.
#[derive(Clone, Debug)]
pub struct MixGrid {
    pub sources: Vec<Vec<f32>>,
    pub donors: Vec<Vec<f32>>,
    pub donor_patches: Vec<usize>,
    /// `cells[r][c]`, planar `C×H×W`, unclamped.
    pub cells: Vec<Vec<Vec<f32>>>,
    pub channels: usize,
    pub size: usize,
}

fn planes(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let n = t.shape()[0];
    let len = t.len() / n.max(1);
    t.data().chunks(len).map(<[f32]>::to_vec).collect()
}

fn channel_means(img: &[f32], channels: usize) -> Vec<f64> {
    let plane = img.len() / channels;
    img.chunks(plane).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl MixGrid {
    /// Grid size in tiles: `(donors + 1, sources + 1)`.
    pub fn tiles(&self) -> (usize, usize) {
        (self.donors.len() + 1, self.sources.len() + 1)
    }

    /// The whole grid as one `C×(rows·H)×(cols·W)` image; the corner tile is white.
    pub fn render(&self) -> Tensor<f32> {
        let (rows, cols) = self.tiles();
        let (c, s) = (self.channels, self.size);
        let (h, w) = (rows * s, cols * s);
        let mut out = vec![1f32; c * h * w];
        let mut blit = |r: usize, col: usize, img: &[f32]| {
            for ch in 0..c {
                for y in 0..s {
                    let dst = ch * h * w + (r * s + y) * w + col * s;
                    out[dst..dst + s].copy_from_slice(&img[ch * s * s + y * s..ch * s * s + (y + 1) * s]);
                }
            }
        };
        for (j, src) in self.sources.iter().enumerate() {
            blit(0, j + 1, src);
        }
        for (i, donor) in self.donors.iter().enumerate() {
            blit(i + 1, 0, donor);
            for (j, cell) in self.cells[i].iter().enumerate() {
                blit(i + 1, j + 1, cell);
            }
        }
        Tensor::raw(vec![c, h, w], out)
    }

    /// Per donor row, the fraction of cells whose channel means lie closer
    /// to the donor's than to the anatomy source's.
    pub fn row_color_agreement(&self) -> Vec<f64> {
        let c = self.channels;
        let src: Vec<Vec<f64>> = self.sources.iter().map(|s| channel_means(s, c)).collect();
        self.donors
            .iter()
            .zip(&self.cells)
            .map(|(donor, row)| {
                let dm = channel_means(donor, c);
                let hits = row
                    .iter()
                    .zip(&src)
                    .filter(|(cell, sm)| {
                        let cm = channel_means(cell, c);
                        dist(&cm, &dm) < dist(&cm, sm)
                    })
                    .count();
                hits as f64 / row.len() as f64
            })
            .collect()
    }

    /// Fraction of all mixed cells that follow their donor's colour.
    pub fn color_agreement(&self) -> f64 {
        let rows = self.row_color_agreement();
        rows.iter().sum::<f64>() / rows.len() as f64
    }

    /// The check passes when a majority of cells follow the donor.
    pub fn rows_share_donor_color(&self) -> bool {
        self.color_agreement() > 0.5
    }
}

/// Build the grid for `S` anatomy sources and `D` donors (`N×C×H×W` each),
/// drawing one random characteristic patch per donor.
pub fn mix_grid(encoder: &Encoder<f32>, sources: &Tensor<f32>, donors: &Tensor<f32>, rng: &mut impl Rng) -> Result<MixGrid> {
    let cfg = encoder.config();
    if sources.shape()[1..] != donors.shape()[1..] || sources.rank() != 4 {
        return Err(Error::Shape(format!("grid inputs {:?} and {:?}", sources.shape(), donors.shape())));
    }
    let (ns, nd) = (sources.shape()[0], donors.shape()[0]);
    let (np, half) = (cfg.num_patches(), cfg.half());
    let donor_patches: Vec<usize> = (0..nd).map(|_| rng.gen_range(0..np)).collect();

    let g = Graph::new();
    let p = encoder.bind(&g, false);
    let src = encoder.encode(&p, g.constant(sources.clone()))?;
    let don = encoder.encode(&p, g.constant(donors.clone()))?;
    let geom = encoder.synth_geometry();
    // every (donor, source) pair in one batch, donor-major
    let anatomy = src.anatomy.index_select(&(0..nd * ns).map(|k| k % ns).collect::<Vec<_>>())?;
    let rows: Vec<usize> = (0..nd * ns).map(|k| (k / ns) * np + donor_patches[k / ns]).collect();
    let characteristic = don.characteristic.reshape(&[nd * np, half])?.index_select(&rows)?;
    let mixed = synthesize(anatomy, characteristic, &geom)?.value();
    let flat = planes(&mixed);
    let cells = flat.chunks(ns).map(<[Vec<f32>]>::to_vec).collect();
    Ok(MixGrid {
        sources: planes(sources),
        donors: planes(donors),
        donor_patches,
        cells,
        channels: cfg.channels,
        size: cfg.image_size,
    })
}

/// [`mix_grid`] written as one PPM (values clamped on export).
pub fn dump_mix_grid(
    encoder: &Encoder<f32>,
    sources: &Tensor<f32>,
    donors: &Tensor<f32>,
    rng: &mut impl Rng,
    path: &Path,
) -> Result<MixGrid> {
    let grid = mix_grid(encoder, sources, donors, rng)?;
    let img = grid.render();
    let s = img.shape();
    ppm::write_image(path, s[2], s[1], img.data())?;
    Ok(grid)
}
