//! Raw numeric kernels shared by the forward and backward passes.

use super::Real;
use crate::par;

/// Rows per work item for shared-weight matrix products.
const ROW_BLOCK: usize = 256;
/// Rows per partial sum of a shared-weight gradient.
const GRAD_BLOCK: usize = 2048;
/// Below this many multiply-adds a plain loop beats packing.
const SMALL_GEMM: usize = 1024;
const ELEM_CHUNK: usize = 1 << 14;

/// A strided matrix view: element `(r, c)` lives at `offset + r*rs + c*cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows×cols`, optionally read transposed.
    pub fn row_major(cols: usize, transposed: bool) -> Self {
        if transposed {
            Layout { rs: 1, cs: cols as isize }
        } else {
            Layout { rs: cols as isize, cs: 1 }
        }
    }
}

/// `c (+)= a·b` where `a` is `m×k`, `b` is `k×n`, `c` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() as isize > (m as isize - 1) * la.rs + (k as isize - 1) * la.cs);
    debug_assert!(k == 0 || n == 0 || b.len() as isize > (k as isize - 1) * lb.rs + (n as isize - 1) * lb.cs);
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    let av = a[(i as isize * la.rs + p as isize * la.cs) as usize];
                    let bv = b[(p as isize * lb.rs + j as isize * lb.cs) as usize];
                    acc += av * bv;
                }
                if accumulate {
                    c[i * n + j] += acc;
                } else {
                    c[i * n + j] = acc;
                }
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the debug assertions above describe the extent of every view;
    // callers derive the views from tensors whose shapes were validated.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched product over `batch` independent matrices.
/// `a_stride`/`b_stride` are the element offsets between consecutive batch
/// items (0 broadcasts a single operand).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<T: Real>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_stride: usize,
    la: Layout,
    b: &[T],
    b_stride: usize,
    lb: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), batch * m * n);
    // group several small products per task to amortize scheduling
    let per_task = (ROW_BLOCK * 64 / (m * n).max(1)).clamp(1, batch.max(1));
    par::for_each_chunk_mut(c, per_task * m * n, |ti, cc| {
        let items = cc.len() / (m * n);
        for j in 0..items {
            let bi = ti * per_task + j;
            let cslice = &mut cc[j * m * n..(j + 1) * m * n];
            gemm(
                m,
                k,
                n,
                &a[bi * a_stride..],
                la,
                &b[bi * b_stride..],
                lb,
                cslice,
                accumulate,
            );
        }
    });
}

/// `c[rows×n] (+)= a[rows×k] · b` where `b` is a single `k×n` operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rows_gemm<T: Real>(
    rows: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    lb: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), rows * n);
    par::for_each_chunk_mut(c, ROW_BLOCK * n, |ci, cc| {
        let r = cc.len() / n;
        let start = ci * ROW_BLOCK;
        gemm(
            r,
            k,
            n,
            &a[start * k..(start + r) * k],
            Layout::row_major(k, false),
            b,
            lb,
            cc,
            accumulate,
        );
    });
}

/// Accumulate `aᵀ·g` over all rows into `out`, the weight gradient of a
/// shared-weight product. `out` is `k×n`, or `n×k` with `transposed_out`.
pub(crate) fn rows_gemm_weight_grad<T: Real>(
    rows: usize,
    k: usize,
    n: usize,
    a: &[T],
    g: &[T],
    out: &mut [T],
    transposed_out: bool,
) {
    let blocks = rows.div_ceil(GRAD_BLOCK);
    let partials = par::map_range(blocks, |bi| {
        let start = bi * GRAD_BLOCK;
        let r = (rows - start).min(GRAD_BLOCK);
        let mut p = vec![T::zero(); k * n];
        if transposed_out {
            // out is n×k: gᵀ·a
            gemm(
                n,
                r,
                k,
                &g[start * n..(start + r) * n],
                Layout::row_major(n, true),
                &a[start * k..(start + r) * k],
                Layout::row_major(k, false),
                &mut p,
                false,
            );
        } else {
            gemm(
                k,
                r,
                n,
                &a[start * k..(start + r) * k],
                Layout::row_major(k, true),
                &g[start * n..(start + r) * n],
                Layout::row_major(n, false),
                &mut p,
                false,
            );
        }
        p
    });
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copy `data` (with `shape`) into the axis order `axes`.
pub(crate) fn permute<T: Copy + Default + Send + Sync>(
    shape: &[usize],
    data: &[T],
    axes: &[usize],
) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![T::default(); data.len()];
    permute_into(shape, data, axes, &mut out, false);
    (out_shape, out)
}

/// Scatter/gather core of `permute`. With `inverse` the roles flip: `src`
/// is laid out in the permuted order and is written back in `shape` order.
pub(crate) fn permute_into<T: Copy + Send + Sync>(
    shape: &[usize],
    src: &[T],
    axes: &[usize],
    dst: &mut [T],
    inverse: bool,
) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // source stride for each output axis
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    if rank == 0 || src.is_empty() {
        return;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = gather[rank - 1];
    let outer = src.len() / inner;

    let offset_of = |mut row: usize| {
        let mut off = 0;
        for ax in (0..rank - 1).rev() {
            let d = out_shape[ax];
            off += (row % d) * gather[ax];
            row /= d;
        }
        off
    };

    if inverse {
        // dst is in `shape` order; src is in permuted order.
        for row in 0..outer {
            let base = offset_of(row);
            let s = &src[row * inner..(row + 1) * inner];
            for (j, &v) in s.iter().enumerate() {
                dst[base + j * inner_stride] = v;
            }
        }
    } else {
        let rows_per_chunk = (ELEM_CHUNK / inner).max(1);
        par::for_each_chunk_mut(dst, rows_per_chunk * inner, |ci, d| {
            let first = ci * rows_per_chunk;
            for (r, drow) in d.chunks_mut(inner).enumerate() {
                let base = offset_of(first + r);
                for (j, x) in drow.iter_mut().enumerate() {
                    *x = src[base + j * inner_stride];
                }
            }
        });
    }
}

/// Decompose `shape` around `axis` into (outer, n, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    if inner == 1 {
        let rows = (ELEM_CHUNK / n).max(1);
        par::for_each_chunk_mut(&mut y, rows * n, |ci, yc| {
            let xc = &x[ci * rows * n..ci * rows * n + yc.len()];
            for (yr, xr) in yc.chunks_mut(n).zip(xc.chunks(n)) {
                let mx = xr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                for (o, &v) in yr.iter_mut().zip(xr) {
                    *o = (v - mx).fast_exp();
                }
                let inv = T::one() / yr.iter().copied().sum::<T>();
                yr.iter_mut().for_each(|o| *o *= inv);
            }
        });
        return y;
    }
    par::for_each_chunk_mut(&mut y, n * inner, |o, yo| {
        debug_assert!(o < outer);
        let xo = &x[o * n * inner..(o + 1) * n * inner];
        for i in 0..inner {
            let mut mx = T::neg_infinity();
            for j in 0..n {
                mx = mx.max(xo[j * inner + i]);
            }
            let mut s = T::zero();
            for j in 0..n {
                let e = (xo[j * inner + i] - mx).fast_exp();
                yo[j * inner + i] = e;
                s += e;
            }
            let inv = T::one() / s;
            for j in 0..n {
                yo[j * inner + i] *= inv;
            }
        }
    });
    y
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], g: &[T], n: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    if inner == 1 {
        let rows = (ELEM_CHUNK / n).max(1);
        par::for_each_chunk_mut(&mut dx, rows * n, |ci, dc| {
            let s = ci * rows * n;
            let (yc, gc) = (&y[s..s + dc.len()], &g[s..s + dc.len()]);
            for ((dr, yr), gr) in dc.chunks_mut(n).zip(yc.chunks(n)).zip(gc.chunks(n)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
        });
        return dx;
    }
    par::for_each_chunk_mut(&mut dx, n * inner, |o, dxo| {
        let yo = &y[o * n * inner..(o + 1) * n * inner];
        let go = &g[o * n * inner..(o + 1) * n * inner];
        for i in 0..inner {
            let mut dot = T::zero();
            for j in 0..n {
                dot += yo[j * inner + i] * go[j * inner + i];
            }
            for j in 0..n {
                let k = j * inner + i;
                dxo[k] = yo[k] * (go[k] - dot);
            }
        }
    });
    dx
}

/// Mean and `1/√(var + eps)` of one slice.
fn moments<T: Real>(xs: impl Iterator<Item = T> + Clone, nf: T, eps: T) -> (T, T) {
    let mean = xs.clone().sum::<T>() / nf;
    let var = xs.map(|a| (a - mean) * (a - mean)).sum::<T>() / nf;
    (mean, T::one() / (var + eps).sqrt())
}

/// Normalizes along the middle axis; returns (normalized, reciprocal std).
pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    outer: usize,
    n: usize,
    inner: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let nf = T::from_usize(n).unwrap();
    let mut y = vec![T::zero(); x.len()];
    if inner == 1 {
        let stats = par::map_range(outer, |r| moments(x[r * n..(r + 1) * n].iter().copied(), nf, eps));
        let rows = (ELEM_CHUNK / n).max(1);
        par::for_each_chunk_mut(&mut y, rows * n, |ci, yc| {
            let xc = &x[ci * rows * n..ci * rows * n + yc.len()];
            for (k, (yr, xr)) in yc.chunks_mut(n).zip(xc.chunks(n)).enumerate() {
                let (mean, r) = stats[ci * rows + k];
                for (o, &a) in yr.iter_mut().zip(xr) {
                    *o = (a - mean) * r;
                }
            }
        });
        return (y, stats.into_iter().map(|(_, r)| r).collect());
    }
    let stats: Vec<(T, T)> = par::map_range(outer * inner, |r| {
        let (o, i) = (r / inner, r % inner);
        let xo = &x[o * n * inner..(o + 1) * n * inner];
        moments((0..n).map(|j| xo[j * inner + i]), nf, eps)
    });
    par::for_each_chunk_mut(&mut y, n * inner, |o, yo| {
        let xo = &x[o * n * inner..(o + 1) * n * inner];
        for j in 0..n {
            for i in 0..inner {
                let (mean, r) = stats[o * inner + i];
                yo[j * inner + i] = (xo[j * inner + i] - mean) * r;
            }
        }
    });
    (y, stats.into_iter().map(|(_, r)| r).collect())
}

pub(crate) fn layer_norm_backward<T: Real>(
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    n: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); xhat.len()];
    let nf = T::from_usize(n).unwrap();
    if inner == 1 {
        let rows = (ELEM_CHUNK / n).max(1);
        par::for_each_chunk_mut(&mut dx, rows * n, |ci, dc| {
            let s = ci * rows * n;
            let (xc, gc) = (&xhat[s..s + dc.len()], &g[s..s + dc.len()]);
            for (k, ((dr, xr), gr)) in dc.chunks_mut(n).zip(xc.chunks(n)).zip(gc.chunks(n)).enumerate() {
                let sg = gr.iter().copied().sum::<T>() / nf;
                let sgx = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                let r = rstd[ci * rows + k];
                for ((d, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                    *d = r * (gv - sg - xv * sgx);
                }
            }
        });
        return dx;
    }
    par::for_each_chunk_mut(&mut dx, n * inner, |o, dxo| {
        let xo = &xhat[o * n * inner..(o + 1) * n * inner];
        let go = &g[o * n * inner..(o + 1) * n * inner];
        for i in 0..inner {
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for j in 0..n {
                let k = j * inner + i;
                sg += go[k];
                sgx += go[k] * xo[k];
            }
            let r = rstd[o * inner + i];
            for j in 0..n {
                let k = j * inner + i;
                dxo[k] = r * (go[k] - sg / nf - xo[k] * sgx / nf);
            }
        }
    });
    dx
}

pub(crate) fn map_unary<T: Real>(x: &[T], f: impl Fn(T) -> T + Sync + Send) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut y, ELEM_CHUNK, |ci, yc| {
        let xc = &x[ci * ELEM_CHUNK..ci * ELEM_CHUNK + yc.len()];
        for (o, &v) in yc.iter_mut().zip(xc) {
            *o = f(v);
        }
    });
    y
}

pub(crate) fn map_binary<T: Real>(
    x: &[T],
    y: &[T],
    f: impl Fn(T, T) -> T + Sync + Send,
) -> Vec<T> {
    debug_assert_eq!(x.len(), y.len());
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, ELEM_CHUNK, |ci, oc| {
        let s = ci * ELEM_CHUNK;
        for (k, o) in oc.iter_mut().enumerate() {
            *o = f(x[s + k], y[s + k]);
        }
    });
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `tanh(√(2/π)·(x + 0.044715·x³))`, the inner term of tanh-approximated GELU.
#[inline(always)]
fn gelu_tanh<T: Real>(x: T) -> T {
    let u = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    let two = T::lit(2.0);
    T::one() - two / ((u + u).fast_exp() + T::one())
}

/// Tanh-approximated GELU. Returns the activations and the tanh terms the
/// backward pass reuses.
pub(crate) fn gelu_forward<T: Real>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let t = map_unary(x, gelu_tanh);
    let half = T::lit(0.5);
    let y = map_binary(x, &t, |x, t| half * x * (T::one() + t));
    (y, t)
}

/// `g · gelu'(x)` given the cached tanh terms.
pub(crate) fn gelu_backward<T: Real>(x: &[T], t: &[T], g: &[T]) -> Vec<T> {
    let mut d = vec![T::zero(); x.len()];
    let (half, c, c3) = (T::lit(0.5), T::lit(SQRT_2_OVER_PI), T::lit(3.0 * GELU_CUBIC));
    par::for_each_chunk_mut(&mut d, ELEM_CHUNK, |ci, dc| {
        let s = ci * ELEM_CHUNK;
        let e = s + dc.len();
        for (((o, &xv), &tv), &gv) in dc.iter_mut().zip(&x[s..e]).zip(&t[s..e]).zip(&g[s..e]) {
            let du = c * (T::one() + c3 * xv * xv);
            *o = gv * (half * (T::one() + tv) + half * xv * (T::one() - tv * tv) * du);
        }
    });
    d
}

/// `out[k] = f(a[k], b[k mod |b|])`: `b` repeats over the leading axes of `a`.
pub(crate) fn map_broadcast<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync + Send) -> Vec<T> {
    let bl = b.len();
    let reps = (ELEM_CHUNK / bl).max(1);
    let mut out = vec![T::zero(); a.len()];
    par::for_each_chunk_mut(&mut out, reps * bl, |ci, oc| {
        let ac = &a[ci * reps * bl..ci * reps * bl + oc.len()];
        for (orow, arow) in oc.chunks_mut(bl).zip(ac.chunks(bl)) {
            for ((o, &x), &y) in orow.iter_mut().zip(arow).zip(b) {
                *o = f(x, y);
            }
        }
    });
    out
}

/// Add every `|acc|`-sized block of `g` (scaled elementwise by the matching
/// block of `w` when given) into `acc`.
pub(crate) fn reduce_blocks_into<T: Real>(acc: &mut [T], g: &[T], w: Option<&[T]>) {
    let bl = acc.len();
    match w {
        None => {
            for chunk in g.chunks(bl) {
                for (o, &v) in acc.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
        }
        Some(w) => {
            for (chunk, wc) in g.chunks(bl).zip(w.chunks(bl)) {
                for ((o, &v), &s) in acc.iter_mut().zip(chunk).zip(wc) {
                    *o += v * s;
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Unfold NHWC input into `(b·ho·wo) × (k·k·c)` rows, zero padding outside.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
    let mut cols = vec![T::zero(); g.rows() * pl];
    par::for_each_chunk_mut(&mut cols, wo * pl, |r, row| {
        let b = r / ho;
        let oy = r % ho;
        for ox in 0..wo {
            let dst = &mut row[ox * pl..(ox + 1) * pl];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.height as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.width as isize {
                        continue;
                    }
                    let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.channels;
                    let d = (ky * g.kernel + kx) * g.channels;
                    dst[d..d + g.channels].copy_from_slice(&x[src..src + g.channels]);
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: fold column gradients back onto the input.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
    let img = g.height * g.width * g.channels;
    let mut dx = vec![T::zero(); g.batch * img];
    par::for_each_chunk_mut(&mut dx, img, |b, dimg| {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &cols[((b * ho + oy) * wo + ox) * pl..][..pl];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.width + ix as usize) * g.channels;
                        let s = (ky * g.kernel + kx) * g.channels;
                        for c in 0..g.channels {
                            dimg[dst + c] += row[s + c];
                        }
                    }
                }
            }
        }
    });
    dx
}
