use std::collections::BTreeMap;

use super::real::Real;
use super::rng::SeedRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameters with a parallel gradient map.
///
/// Names are dotted paths (`reasoner.blocks.0.attn.q.weight`) and iteration
/// order is lexicographic, which is also the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.grads
            .insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
    }

    /// Gaussian init with `std = gain / sqrt(fan_in)`.
    pub fn insert_randn(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut SeedRng,
    ) {
        let std = gain / (fan_in as f64).sqrt();
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_with_grads_mut(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor<T>, &Tensor<T>)> {
        self.params
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, p), g)| (k.as_str(), p, g))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `grad[name] += scale * g` for every entry of `grads`.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor<T>>, scale: T) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .grads
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if slot.shape() != g.shape() {
                return Err(Error::shape("accumulate", slot.shape(), g.shape()));
            }
            for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, c: T) {
        for g in self.grads.values_mut() {
            g.scale_in_place(c);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            grads: self
                .grads
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Sub-set of entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (k, v) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.insert(k.clone(), v.clone());
        }
        out
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        for (k, v) in other.params {
            self.insert(k, v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}
