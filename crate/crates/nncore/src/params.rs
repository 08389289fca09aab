use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// How a parameter is filled by [`ParameterStore::init`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// `[fan_in, fan_out]` weight matrix with Xavier init.
    pub fn weight(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self::new(name, &[fan_in, fan_out], Init::Xavier { fan_in, fan_out })
    }

    pub fn bias(name: impl Into<String>, n: usize) -> Self {
        Self::new(name, &[n], Init::Zeros)
    }
}

/// Named parameters plus the seed they were initialized from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    seed: u64,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
        }
    }

    /// Materializes every spec. Each tensor draws from its own stream keyed by
    /// `(seed, name)`, so adding or removing a parameter never perturbs the
    /// values of the others.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut store = Self::new(seed);
        for spec in specs {
            store.insert(&spec.name, init_tensor(spec, seed))?;
        }
        Ok(store)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every parameter whose name starts with `prefix` into `self`,
    /// overwriting existing entries.
    pub fn merge_prefix(&mut self, other: &ParameterStore, prefix: &str) {
        for (name, t) in other.iter() {
            if name.starts_with(prefix) {
                self.set(name, t.clone());
            }
        }
    }

    /// Sub-store of parameters under `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParameterStore {
        let mut out = ParameterStore::new(self.seed);
        out.merge_prefix(self, prefix);
        out
    }
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Xavier { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.name.as_bytes()));
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        }
    };
    Tensor::new(spec.shape.clone(), data).expect("spec shape matches generated length")
}

/// Independent deterministic stream for `(seed, tag)`.
pub fn seeded_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tag.as_bytes()))
}

/// 64-bit FNV-1a; stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
