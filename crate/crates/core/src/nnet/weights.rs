use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};
use crate::error::{invalid, Result};

/// One parameter with its LAMB moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Named parameter collection plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    params: BTreeMap<String, Param<T>>,
    /// number of optimizer steps taken
    pub step: u64,
}

impl<T: Real> Default for Weights<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Weights<T> {
    pub fn new() -> Self {
        Weights {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name {name}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Param {
                value,
                m: zeros.clone(),
                v: zeros,
            },
        );
        Ok(())
    }

    pub(crate) fn insert_param(&mut self, name: &str, p: Param<T>) -> Result<()> {
        if p.m.shape() != p.value.shape() || p.v.shape() != p.value.shape() {
            return Err(invalid(format!("moment shapes of {name} do not match its value")));
        }
        if self.params.insert(name.to_string(), p).is_some() {
            return Err(invalid(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k, &p.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            m: p.m.cast(),
                            v: p.v.cast(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::c(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).unwrap()
}

pub fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::c(dist.sample(rng))).collect()).unwrap()
}
