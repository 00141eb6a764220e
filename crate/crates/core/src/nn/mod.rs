//! Parameters, initialisation, layers and optimisers.

mod layers;
mod optim;

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{numel, ParamId, Tensor};

pub use layers::{Attention, Conv2d, ConvFfn, GroupNorm, Linear, Mlp};
pub use optim::{Optimizer, OptimizerConfig};

struct ParamInner {
    id: ParamId,
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    value: RwLock<Arc<Vec<f64>>>,
}

/// A named, shared, mutable weight tensor.
#[derive(Clone)]
pub struct Param(Arc<ParamInner>);

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.0.name, self.0.shape)
    }
}

impl Param {
    fn new(name: String, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> Self {
        Param(Arc::new(ParamInner {
            id: ParamId::fresh(),
            name,
            shape,
            trainable,
            value: RwLock::new(Arc::new(data)),
        }))
    }

    pub fn id(&self) -> ParamId {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable
    }

    pub fn values(&self) -> Arc<Vec<f64>> {
        self.0.value.read().expect("param lock poisoned").clone()
    }

    /// Leaf tensor sharing the current value; gradients flow back to this
    /// parameter's id when it is trainable.
    pub fn tensor(&self) -> Tensor {
        Tensor::leaf(self.values(), self.0.shape.clone(), self.0.trainable, Some(self.0.id))
    }

    pub fn set(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != numel(&self.0.shape) {
            return Err(Error::shape(
                "param.set",
                format!("{}: {} values for {:?}", self.0.name, data.len(), self.0.shape),
            ));
        }
        *self.0.value.write().expect("param lock poisoned") = Arc::new(data);
        Ok(())
    }

    pub fn fill(&self, value: f64) {
        let n = numel(&self.0.shape);
        *self.0.value.write().expect("param lock poisoned") = Arc::new(vec![value; n]);
    }
}

/// Registry of every parameter in a model, ordered by name.
#[derive(Default, Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, p: Param) -> Result<()> {
        if self.params.contains_key(p.name()) {
            return Err(Error::Config(format!("duplicate parameter name {}", p.name())));
        }
        self.params.insert(p.name().to_string(), p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.values().filter(|p| p.trainable())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.values() {
            h.update(p.name().as_bytes());
            for d in p.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.values().iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
}

impl Init {
    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Uniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
        }
    }
}

/// Creates parameters under a dotted name prefix, drawing initial values from
/// a seeded generator so model construction is reproducible.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    trainable: bool,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            trainable: true,
        }
    }

    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            trainable: self.trainable,
        }
    }

    /// Parameters created through the returned builder never receive
    /// gradients.
    pub fn frozen(&mut self) -> ParamBuilder<'_> {
        self.frozen_if(true)
    }

    pub fn frozen_if(&mut self, frozen: bool) -> ParamBuilder<'_> {
        let prefix = self.prefix.clone();
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            trainable: self.trainable && !frozen,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Param> {
        let data = init.sample(numel(shape), self.rng);
        let p = Param::new(self.path(name), shape.to_vec(), data, self.trainable);
        self.store.insert(p.clone())?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_paths_and_duplicates() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        pb.pp("a").pp("b").param("w", &[2], Init::Zeros).unwrap();
        assert!(pb.pp("a").pp("b").param("w", &[2], Init::Zeros).is_err());
        assert!(store.get("a.b.w").is_some());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ParamBuilder::new(&mut store, &mut rng)
            .param("w", &[3], Init::Normal { std: 1.0 })
            .unwrap();
        let before = store.checksum();
        p.fill(0.0);
        assert_ne!(before, store.checksum());
    }

    #[test]
    fn frozen_params_do_not_require_grad() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let p = pb.frozen().param("w", &[1], Init::Const(1.0)).unwrap();
        assert!(!p.tensor().requires_grad());
    }
}
