use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub gradient: Tensor,
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let gradient = Tensor::zeros(tensor.shape());
        self.params.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                tensor,
                gradient,
            },
        );
        Ok(())
    }

    pub fn insert_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if !p.gradient.same_shape(grad) {
            return Err(Error::shape("accumulate_grad", p.gradient.shape(), grad.shape()));
        }
        p.gradient.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.gradient.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// True when `other` has exactly the same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((n1, p1), (n2, p2))| n1 == n2 && p1.tensor.shape() == p2.tensor.shape())
    }
}
