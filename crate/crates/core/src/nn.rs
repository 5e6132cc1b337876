//! Named parameter storage and the small layer helpers built on it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { entries: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    /// Normal(0, std) weights.
    pub fn push_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> usize {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        self.push(name, Tensor::new(shape, data).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Replace values from another set with identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((n, t), (on, ot)) in self.entries.iter_mut().zip(&other.entries) {
            if n != on || t.shape() != ot.shape() {
                return Err(Error::Config(format!(
                    "parameter {n} {:?} does not match {on} {:?}",
                    t.shape(),
                    ot.shape()
                )));
            }
            *t = ot.clone();
        }
        Ok(())
    }

    /// Insert every tensor into `graph` as a leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a [`ParamSet`], in the same order.
pub struct Bound<'g, T: Real> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn var(&self, i: usize) -> Var<'g, T> {
        self.vars[i]
    }

    /// Gradients in parameter order; zeros where no gradient reached.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

/// Indices of a dense layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn init<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.push_normal(&format!("{name}.weight"), &[fan_in, fan_out], std, rng);
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { weight, bias }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(p.var(self.weight))?.add(p.var(self.bias))
    }
}

/// Indices of a layer norm's affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init<T: Real>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = params.push(format!("{name}.weight"), Tensor::ones(&[dim]));
        let beta = params.push(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(-1, T::lit(LAYER_NORM_EPS))?
            .mul(p.var(self.gamma))?
            .add(p.var(self.beta))
    }
}
