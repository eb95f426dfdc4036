//! Named parameter collections and their deterministic initialisation.

use std::collections::BTreeMap;

use ndarray::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::ops::Tensor;

/// A flat, ordered map from dotted parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
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

    /// Total number of scalar values.
    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies every tensor whose name starts with `from` into `self` under
    /// the name with that prefix replaced by `to`.
    pub fn copy_prefixed(&mut self, source: &ParamSet, from: &str, to: &str) -> usize {
        let mut copied = 0;
        for (name, t) in source.iter() {
            if let Some(rest) = name.strip_prefix(from) {
                let target = format!("{to}{rest}");
                if let Some(slot) = self.tensors.get_mut(&target) {
                    if slot.dim() == t.dim() {
                        slot.assign(t);
                        copied += 1;
                    }
                }
            }
        }
        copied
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// How a freshly created tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal scaled by fan-in; `gain` multiplies the standard deviation.
    He { gain: f64 },
    Zeros,
    Ones,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Builds a tensor for `name`. The random stream is derived from the model
/// seed and the parameter name, so a parameter gets the same initial value in
/// every architecture variant that contains it.
pub fn init_tensor(name: &str, shape: (usize, usize, usize, usize), init: Init, seed: u64) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::He { gain } => {
            let fan_in = (shape.1 * shape.2 * shape.3).max(1) as f64;
            let std = gain * (2.0 / fan_in).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
            let normal = Normal::new(0.0, std).expect("positive std");
            Array::from_shape_fn(shape, |_| normal.sample(&mut rng))
        }
    }
}
