use std::collections::BTreeMap;

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Named learnable tensors, ordered by name so iteration is stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter `{name}`");
        self.entries.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) {
        let slot = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(slot.shape(), t.shape(), "shape change for `{name}`");
        *slot = t;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Initialisers used when building fresh models.
pub mod init {
    use super::*;

    /// Uniform in `±sqrt(6 / fan_in)` scaled by `gain` (He-style).
    pub fn he_uniform<T: Real>(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        uniform(rng, shape, bound)
    }

    pub fn uniform<T: Real>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::cst(rng.gen_range(-bound..=bound))).collect();
        Tensor::new(shape, data)
    }
}
