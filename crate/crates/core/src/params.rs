//! Named parameter storage and its binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered map from parameter name to tensor. Iteration is by name, which
/// fixes every reduction and serialization order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Option<Tensor<F>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Registers every tensor as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<F>, trainable: bool) -> BoundParams {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), graph.leaf(v.clone(), trainable))).collect();
        BoundParams { vars }
    }
}

/// Parameter names resolved to graph leaves.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient map keyed by parameter name; unused parameters get zeros.
    pub fn collect_grads<F: Real>(&self, grads: &Gradients<F>) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for (name, v) in &self.vars {
            out.insert(name.clone(), grads.wrt(*v));
        }
        out
    }
}

/// Creates parameters in a fixed order from a seeded stream.
///
/// Kernels use He-uniform initialization, `U(−b, b)` with
/// `b = sqrt(6 / fan_in)`; biases and norm shifts start at zero and norm
/// scales at one.
pub struct ParamBuilder<'a, F> {
    rng: &'a mut ChaCha8Rng,
    params: &'a mut ParamSet<F>,
}

impl<'a, F: Real> ParamBuilder<'a, F> {
    pub fn new(rng: &'a mut ChaCha8Rng, params: &'a mut ParamSet<F>) -> Self {
        ParamBuilder { rng, params }
    }

    fn he_uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..bound))).expect("positive extents");
        self.params.insert(name, t);
    }

    /// Convolution kernel `[kh, kw, cin_per_group, cout]`.
    pub fn conv(&mut self, name: String, kh: usize, kw: usize, cin_per_group: usize, cout: usize) {
        self.he_uniform(name, vec![kh, kw, cin_per_group, cout], kh * kw * cin_per_group);
    }

    /// Dense projection `[rows, cols]` applied as `x · W`.
    pub fn matrix(&mut self, name: String, rows: usize, cols: usize) {
        self.he_uniform(name, vec![rows, cols], rows);
    }

    pub fn zeros(&mut self, name: String, len: usize) {
        self.params.insert(name, Tensor::zeros(vec![len]).expect("positive extent"));
    }

    pub fn ones(&mut self, name: String, len: usize) {
        self.params.insert(name, Tensor::ones(vec![len]).expect("positive extent"));
    }
}
