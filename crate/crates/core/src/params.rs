//! Named parameter tensors and their initializers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
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

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Zeroes every tensor whose name starts with `prefix`; returns how many matched.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }
}

/// Leaky-rectifier slope used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// He-normal initialization for a layer followed by a leaky rectifier.
pub fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
    normal(rng, shape, std)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Registers `{prefix}.w` of shape `(cout, cin, k, k)` and `{prefix}.b`.
pub fn init_conv(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{prefix}.w"), he_normal(rng, &[cout, cin, k, k], cin * k * k));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

/// Same as [`init_conv`] but with all-zero weights.
pub fn init_conv_zero(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[cout, cin, k, k]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

/// Registers `{prefix}.w` of shape `(out, in)` and `{prefix}.b`.
pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, fin: usize, fout: usize) {
    store.insert(format!("{prefix}.w"), he_normal(rng, &[fout, fin], fin));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fout]));
}
