use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RandomState;
use crate::tensor::Tensor;

/// Named model parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from a normal truncated at two
    /// standard deviations and rescaled to std 0.02.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut RandomState) {
        let scale = 0.02 / truncated_std();
        let w = Tensor::from_fn([fan_in, fan_out], |_| scale * rng.truncated_normal());
        self.insert(format!("{name}.w"), w);
        self.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
    }

    pub fn init_layer_norm(&mut self, name: &str, d: usize) {
        self.insert(format!("{name}.gamma"), Tensor::ones([d]));
        self.insert(format!("{name}.beta"), Tensor::zeros([d]));
    }

    /// Puts every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects each parameter's gradient, zero-filled where none flowed.
    pub fn gradients(&self, grads: &mut Gradients, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = grads.take(*v).unwrap_or_else(|| {
                    Tensor::zeros(store.get(k).map(|t| t.shape().to_vec()).unwrap_or_default())
                });
                (k.clone(), g)
            })
            .collect()
    }

    /// `x · W + b` for the linear layer `name`.
    pub fn linear(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.var(&format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn layer_norm(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Std of a unit normal truncated to `[-2, 2]`.
fn truncated_std() -> f64 {
    let mass = libm::erf(std::f64::consts::SQRT_2);
    let density = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (1.0 - 4.0 * density / mass).sqrt()
}
