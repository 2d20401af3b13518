use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub scheme: InitScheme,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub init: InitRecord,
}

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds and initializes a parameter. Names must be unique.
    pub fn init(&mut self, name: &str, shape: Vec<usize>, scheme: InitScheme, seed: u64) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let mut tensor = match scheme {
            InitScheme::Zeros => Tensor::zeros(shape),
            InitScheme::Ones => Tensor::full(shape, 1.0),
            InitScheme::XavierUniform => {
                let fan_in = shape.first().copied().unwrap_or(1);
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut r = rng::seeded(seed);
                let mut t = Tensor::zeros(shape);
                t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-bound..bound));
                t
            }
        };
        tensor.requires_grad = true;
        self.params.insert(name.to_string(), Param { tensor, init: InitRecord { scheme, seed } });
        Ok(())
    }

    /// Inserts a parameter with explicit contents, replacing any previous one.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor, init: InitRecord) {
        tensor.requires_grad = true;
        self.params.insert(name.to_string(), Param { tensor, init });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Adds the gradients of every parameter bound in `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (name, var) in graph.bound_params() {
            let (Some(p), Some(g)) = (self.params.get_mut(name), graph.grad(var)) else { continue };
            let dst = p.tensor.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.grad = None;
        }
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.tensor.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds_and_determinism() {
        let mut a = ParamStore::new();
        a.init("w", vec![30, 20], InitScheme::XavierUniform, 4).unwrap();
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        let mut b = ParamStore::new();
        b.init("w", vec![30, 20], InitScheme::XavierUniform, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.init("w", vec![1], InitScheme::Zeros, 0).is_err());
    }
}
