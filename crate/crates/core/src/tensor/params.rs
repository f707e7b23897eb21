//! Named parameter storage. Keys are stable dotted paths; gradients
//! accumulate across backward passes until explicitly cleared, so one
//! optimizer step can aggregate several per-network losses.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A tensor with an optional accumulated gradient of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Ordered map from parameter path to parameter. Ordering makes iteration,
/// serialization and optimizer traversal deterministic.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    /// Insert a parameter, replacing any previous tensor under the key.
    pub fn insert(&mut self, key: &str, value: Tensor<T>) {
        self.params.insert(key.to_string(), Parameter { value, grad: None });
    }

    /// Insert a parameter drawn from N(0, std^2).
    pub fn insert_gaussian<R: Rng>(&mut self, key: &str, shape: &[usize], std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::from_f64_val(dist.sample(rng))).collect();
        self.insert(key, Tensor::from_vec(shape, data).expect("shape matches count"));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.params.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Result<&Parameter<T>> {
        self.params
            .get(key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {key}")))
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {key}")))
    }

    /// The full value tensor for a key.
    pub fn value(&self, key: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(key)?.value)
    }

    /// The value tensor, optionally restricted to a rectangular slice.
    pub fn value_slice(&self, key: &str, slice: Option<&[Range<usize>]>) -> Result<Tensor<T>> {
        let v = self.value(key)?;
        match slice {
            None => Ok(v.clone()),
            Some(ranges) => v.slice(ranges),
        }
    }

    /// Add `g` into the stored gradient, scattering through `slice` when the
    /// consumer only viewed part of the tensor.
    pub fn accumulate_grad(&mut self, key: &str, slice: Option<&[Range<usize>]>, g: &Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {key}")))?;
        let grad = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        match slice {
            None => {
                if grad.shape() != g.shape() {
                    return Err(Error::DimensionMismatch {
                        op: "grad accumulate",
                        detail: format!("{:?} vs {:?} for {key}", grad.shape(), g.shape()),
                    });
                }
                for (a, &b) in grad.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
                Ok(())
            }
            Some(ranges) => grad.slice_accumulate(ranges, g),
        }
    }

    /// Drop all gradients.
    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// True if any parameter currently holds a gradient.
    pub fn has_grads(&self) -> bool {
        self.params.values().any(|p| p.grad.is_some())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of stored value elements.
    pub fn total_elements(&self) -> u64 {
        self.params.values().map(|p| p.value.len() as u64).sum()
    }
}
