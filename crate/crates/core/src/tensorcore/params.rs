use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::real::Real;
use super::tensor::Tensor;

/// Gradients keyed by parameter path.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

/// Learnable parameters keyed by hierarchical dotted path. Iteration order is
/// lexicographic.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
    rng_seed: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Inserts (or replaces) a parameter; it is marked as requiring gradients.
    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(path.into(), t.with_requires_grad(true));
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<T>> {
        self.entries.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            rng_seed: self.rng_seed,
        }
    }

    /// Copies every entry under `prefix` from `other`, replacing existing ones.
    pub fn adopt_prefix(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

/// Seeded initializer: fan-in-scaled uniform weights, zero biases.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}
