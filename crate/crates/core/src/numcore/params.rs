//! Named parameter storage with trainable flags and AdamW moments.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{MovError, Result};

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    /// First moment.
    pub m: Tensor,
    /// Second moment.
    pub v: Tensor,
}

impl Param {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self {
            value,
            trainable,
            m,
            v,
        }
    }
}

/// Ordered map of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param::new(value, trainable));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| MovError::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| MovError::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
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

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Subset of parameters under `prefix`, re-keyed without the prefix.
    pub fn extract_prefix(&self, prefix: &str) -> ParamSet {
        let params = self
            .params
            .iter()
            .filter_map(|(n, p)| n.strip_prefix(prefix).map(|s| (s.to_string(), p.clone())))
            .collect();
        ParamSet { params }
    }

    /// Copies every entry of `other` under `prefix`, overwriting existing names.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (n, p) in &other.params {
            self.params.insert(format!("{prefix}{n}"), p.clone());
        }
    }

    /// Drops optimizer moments (used when a module is re-initialised from another).
    pub fn reset_moments(&mut self) {
        for p in self.params.values_mut() {
            p.m = Tensor::zeros(p.value.shape());
            p.v = Tensor::zeros(p.value.shape());
        }
    }

    /// Bitwise comparison of the values under `prefix`.
    pub fn values_equal_under(&self, other: &ParamSet, prefix: &str) -> bool {
        let a: Vec<_> = self.params.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        let b: Vec<_> = other.params.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, pa), (nb, pb))| {
                na == nb
                    && pa.value.shape() == pb.value.shape()
                    && pa
                        .value
                        .data()
                        .iter()
                        .zip(pb.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Parameter initialisers.
pub mod init {
    use super::*;

    pub const WEIGHT_STD: f64 = 0.02;

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }
}
