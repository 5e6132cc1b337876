//! AdamW with decoupled weight decay and a per-step cosine schedule.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Optimizer state: first and second moments per parameter plus the step
/// counter used for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().map(|t| vec![T::zero(); t.len()]).collect();
        AdamW { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Rebuild from saved moments, checking they match `params`.
    pub fn from_state(
        config: AdamWConfig,
        params: &ParamSet<T>,
        step: u64,
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
    ) -> Result<Self> {
        let lens: Vec<usize> = params.tensors().map(|t| t.len()).collect();
        let ok = |s: &[Vec<T>]| s.len() == lens.len() && s.iter().zip(&lens).all(|(x, &n)| x.len() == n);
        if !ok(&m) || !ok(&v) {
            return Err(Error::Config("optimizer state does not match parameter shapes".into()));
        }
        Ok(AdamW { config, step, m, v })
    }

    /// One update: `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr_t, eps) = (T::lit(lr), T::lit(c.eps));
        let decay = T::lit(lr * c.weight_decay);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - decay * *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))` for `step ∈ [0, total]`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Schedule { step, total });
    }
    let frac = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
