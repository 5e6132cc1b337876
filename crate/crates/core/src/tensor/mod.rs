//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is plain data. Differentiable computation happens on a
//! [`Graph`], which records every operation applied to its [`Var`] handles
//! and replays the chain rule in reverse from a scalar loss.

mod graph;
pub(crate) mod kernels;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use graph::{Graph, Var};

/// Scalar element type. Training runs at `f32`; gradient checks at `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a·b + beta * c` with arbitrary element strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    /// `exp`, allowed to trade the last ulp or so for a branch-free body
    /// that vectorizes.
    #[inline]
    fn fast_exp(self) -> Self {
        self.exp()
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    /// Cody-Waite reduction to `r ∈ [-ln2/2, ln2/2]`, degree-6 Taylor
    /// polynomial, exponent assembled from the rounding constant's bits.
    #[inline(always)]
    fn fast_exp(self) -> f32 {
        const ROUND: f32 = 12_582_912.0; // 1.5·2^23
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        let x = self.clamp(-87.0, 88.0);
        let k = x * std::f32::consts::LOG2_E + ROUND;
        let n = k - ROUND;
        let r = x - n * LN2_HI - n * LN2_LO;
        let p = 1.0
            + r * (1.0
                + r * (0.5
                    + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
        let e = (k.to_bits() as i32).wrapping_sub(0x4B40_0000).wrapping_add(127) << 23;
        p * f32::from_bits(e as u32)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A dense n-dimensional array in row-major order.
///
/// Storage is shared copy-on-write, so clones and reshapes do not copy.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor::raw(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::raw(vec![1], vec![value])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Metadata-only reinterpretation of the row-major buffer.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(&self.shape, axes)?;
        let (shape, data) = kernels::permute(&self.shape, &self.data, axes);
        Ok(Tensor::raw(shape, data))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
        )
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i} (extent {d})");
            off = off * d + ix;
        }
        self.data[off]
    }

    /// Row `i` along the leading axis.
    pub fn row(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_permutation(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(Error::Shape(format!(
            "permutation {axes:?} does not match rank of {shape:?}"
        )));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(Error::Shape(format!("invalid permutation {axes:?}")));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn resolve_axis(shape: &[usize], axis: isize) -> Result<usize> {
    let rank = shape.len() as isize;
    let ax = if axis < 0 { axis + rank } else { axis };
    if ax < 0 || ax >= rank {
        return Err(Error::Axis { axis, shape: shape.to_vec() });
    }
    Ok(ax as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn reshape_is_metadata_only() {
        let t = Tensor::<f32>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = t.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn fast_exp_tracks_exp() {
        for i in -2000..=2000 {
            let x = i as f32 * 0.043;
            let (a, b) = (x.fast_exp(), x.exp());
            assert!(((a - b) / b).abs() < 4e-7, "x={x}: {a} vs {b}");
        }
        assert!(f32::NAN.fast_exp().is_nan());
        // very negative inputs clamp to the smallest normal result, not zero
        let floor = (-1e4f32).fast_exp();
        assert!(((floor - (-87f32).exp()) / (-87f32).exp()).abs() < 4e-7);
    }

    #[test]
    fn clones_share_until_written() {
        let a = Tensor::<f32>::zeros(&[4]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(t.permute(&[0, 0]).is_err());
    }
}
