//! Named parameter tensors kept in a stable (lexicographic) order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};
use crate::rng::SplitMix64;
use crate::Scalar;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut SplitMix64,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let count = shape.iter().product();
        let data = (0..count).map(|_| S::lit(rng.uniform(-bound, bound))).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// A store of the same names and shapes filled with zeros.
    pub fn zeros_like(&self) -> Self {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.zeros_like())).collect() }
    }

    /// Same names and shapes as `self`.
    pub fn matches_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Result<Bound> {
        self.bind_with(g, true)
    }

    /// Records every tensor as a constant.
    pub fn bind_constant(&self, g: &mut Graph<S>) -> Result<Bound> {
        self.bind_with(g, false)
    }

    /// Pairs `vars` with this store's names in iteration order.
    pub fn bound_from_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!("{} vars for {} parameters", vars.len(), self.tensors.len())));
        }
        Ok(Bound { vars: self.tensors.keys().cloned().zip(vars.iter().copied()).collect() })
    }

    pub fn to_tensors(&self) -> Vec<Tensor<S>> {
        self.tensors.values().cloned().collect()
    }

    fn bind_with(&self, g: &mut Graph<S>, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable { g.param(t.clone())? } else { g.constant(t.clone())? };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Adds this pass's gradients into `acc` (zeros where a parameter was unused).
    pub fn accumulate<S: Scalar>(&self, grads: &Gradients<S>, acc: &mut ParamStore<S>) -> Result<()> {
        for (name, &v) in &self.vars {
            if let Some(gv) = grads.get(v) {
                let slot = acc.get_mut(name)?;
                if slot.shape() != gv.shape() {
                    return Err(Error::Shape {
                        op: "accumulate",
                        left: slot.shape().to_vec(),
                        right: gv.shape().to_vec(),
                    });
                }
                for (a, &b) in slot.data_mut().iter_mut().zip(gv.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}
