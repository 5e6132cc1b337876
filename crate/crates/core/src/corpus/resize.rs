//! Separable bicubic resampling with the Catmull-Rom kernel (a = -0.5).
//!
//! Samples outside the image are linearly extrapolated from the two nearest
//! edge pixels, so affine signals are reproduced exactly up to the border.

const A: f64 = -0.5;

fn kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

fn sample(line: &[f64], i: isize) -> f64 {
    let n = line.len() as isize;
    if n == 1 {
        return line[0];
    }
    if i < 0 {
        line[0] + i as f64 * (line[1] - line[0])
    } else if i >= n {
        let last = line[(n - 1) as usize];
        last + (i - n + 1) as f64 * (last - line[(n - 2) as usize])
    } else {
        line[i as usize]
    }
}

/// Resample one line from `line.len()` to `out` points, pixel-centre aligned.
pub fn resize_line(line: &[f64], out: usize) -> Vec<f64> {
    let scale = line.len() as f64 / out as f64;
    (0..out)
        .map(|j| {
            let x = (j as f64 + 0.5) * scale - 0.5;
            let base = x.floor();
            let t = x - base;
            (-1..=2).map(|k| kernel(t - k as f64) * sample(line, base as isize + k)).sum()
        })
        .collect()
}

/// Resize a planar `channels×h×w` image to `channels×oh×ow`.
pub fn resize(data: &[f32], channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0f32; channels * oh * ow];
    for c in 0..channels {
        let plane = &data[c * h * w..(c + 1) * h * w];
        // rows first, then columns
        let rows: Vec<Vec<f64>> =
            (0..h).map(|y| resize_line(&plane[y * w..(y + 1) * w].iter().map(|&v| v as f64).collect::<Vec<_>>(), ow)).collect();
        for x in 0..ow {
            let col: Vec<f64> = rows.iter().map(|r| r[x]).collect();
            for (y, v) in resize_line(&col, oh).into_iter().enumerate() {
                out[c * oh * ow + y * ow + x] = v as f32;
            }
        }
    }
    out
}
