use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// A named, mutable slot holding the current value of a parameter or buffer.
///
/// Reading hands out the current leaf tensor; the optimizer swaps in a fresh
/// leaf after each update, so gradients computed from a forward pass always
/// refer to the tensor that was live during that pass.
#[derive(Clone)]
pub struct Var {
    slot: Arc<RwLock<Tensor>>,
    trainable: bool,
}

impl Var {
    fn new(data: Vec<f64>, shape: &[usize], trainable: bool) -> Var {
        let t = if trainable { Tensor::var(data, shape) } else { Tensor::new(data, shape) };
        Var { slot: Arc::new(RwLock::new(t)), trainable }
    }

    pub fn tensor(&self) -> Tensor {
        self.slot.read().expect("poisoned var").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tensor().to_vec()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Replaces the value, keeping the shape.
    pub fn set(&self, data: Vec<f64>) {
        let mut slot = self.slot.write().expect("poisoned var");
        let shape = slot.shape().to_vec();
        *slot = if self.trainable { Tensor::var(data, &shape) } else { Tensor::new(data, &shape) };
    }
}

/// Parameter initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Const(f64),
    Normal(f64),
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv and linear layers.
    FanInUniform(usize),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Owns every parameter and buffer of a model, addressed by dotted path.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
}

/// Serialised tensor inside a [`Snapshot`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Name-to-value copy of a store's contents.
pub type Snapshot = BTreeMap<String, StoredTensor>;

impl ParamStore {
    /// Empty store; parameters created under it are initialised from `seed`.
    pub fn new(seed: u64) -> ParamStore {
        ParamStore {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    pub fn root(&self) -> Path {
        Path { store: self.clone(), prefix: String::new() }
    }

    fn create(&self, name: String, shape: &[usize], init: Init, trainable: bool) -> Var {
        let mut inner = self.inner.lock().expect("poisoned store");
        assert!(!inner.vars.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut inner.rng);
                    z * std
                })
                .collect(),
            Init::FanInUniform(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| inner.rng.random_range(-bound..bound)).collect()
            }
        };
        let var = Var::new(data, shape, trainable);
        inner.vars.insert(name, var.clone());
        var
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().expect("poisoned store").vars.get(name).cloned()
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("poisoned store");
        inner
            .vars
            .iter()
            .filter(|(_, v)| v.is_trainable())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.tensor().numel()).sum()
    }

    pub fn snapshot(&self) -> Snapshot {
        let inner = self.inner.lock().expect("poisoned store");
        inner
            .vars
            .iter()
            .map(|(k, v)| {
                let t = v.tensor();
                (k.clone(), StoredTensor { shape: t.shape().to_vec(), data: t.to_vec() })
            })
            .collect()
    }

    /// Overwrites every entry from `snap`; names and shapes must match exactly.
    pub fn load(&self, snap: &Snapshot) -> Result<()> {
        let inner = self.inner.lock().expect("poisoned store");
        if inner.vars.len() != snap.len() {
            return Err(Error::Validation(format!(
                "parameter count mismatch: model has {}, snapshot has {}",
                inner.vars.len(),
                snap.len()
            )));
        }
        for (name, var) in &inner.vars {
            let stored = snap
                .get(name)
                .ok_or_else(|| Error::Validation(format!("snapshot lacks parameter {name}")))?;
            if stored.shape != var.shape() || stored.data.len() != stored.shape.iter().product::<usize>() {
                return Err(Error::Validation(format!(
                    "shape mismatch for {name}: model {:?}, snapshot {:?}",
                    var.shape(),
                    stored.shape
                )));
            }
        }
        for (name, var) in &inner.vars {
            var.set(snap[name].data.clone());
        }
        Ok(())
    }
}

/// A position in a [`ParamStore`]'s name hierarchy.
#[derive(Clone)]
pub struct Path {
    store: ParamStore,
    prefix: String,
}

impl Path {
    pub fn push(&self, name: impl AsRef<str>) -> Path {
        Path { store: self.store.clone(), prefix: self.join(name.as_ref()) }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Var {
        self.store.create(self.join(name), shape, init, true)
    }

    /// Non-trainable state (running statistics, power-iteration vectors).
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Var {
        self.store.create(self.join(name), shape, init, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrip_and_mismatch() {
        let a = ParamStore::new(1);
        a.root().push("l").param("w", &[2, 3], Init::Normal(1.0));
        a.root().buffer("b", &[3], Init::Const(0.5));
        let snap = a.snapshot();

        let b = ParamStore::new(2);
        let w = b.root().push("l").param("w", &[2, 3], Init::Normal(1.0));
        b.root().buffer("b", &[3], Init::Const(0.0));
        assert_ne!(b.snapshot(), snap);
        b.load(&snap).unwrap();
        assert_eq!(b.snapshot(), snap);
        assert!(w.tensor().is_tracked());

        let c = ParamStore::new(3);
        c.root().push("l").param("w", &[3, 2], Init::Normal(1.0));
        c.root().buffer("b", &[3], Init::Const(0.0));
        assert!(c.load(&snap).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let mk = || {
            let s = ParamStore::new(9);
            s.root().param("w", &[4], Init::FanInUniform(4)).values()
        };
        assert_eq!(mk(), mk());
    }
}
