//! Named parameter storage split into trainable groups and frozen weights.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Adapter0,
    Lora,
    /// Trainable transformer standing in for the frozen layer (ablation).
    Vit,
    StageAdapters,
    Fuse,
    FlowHeads,
    /// Pretrained transformer weights; never updated.
    Frozen,
}

impl ParamGroup {
    pub const TRAINABLE: [ParamGroup; 7] = [
        ParamGroup::Encoder,
        ParamGroup::Adapter0,
        ParamGroup::Lora,
        ParamGroup::Vit,
        ParamGroup::StageAdapters,
        ParamGroup::Fuse,
        ParamGroup::FlowHeads,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Adapter0 => "adapter0",
            ParamGroup::Lora => "lora",
            ParamGroup::Vit => "vit",
            ParamGroup::StageAdapters => "stage_adapters",
            ParamGroup::Fuse => "fuse",
            ParamGroup::FlowHeads => "flow_heads",
            ParamGroup::Frozen => "frozen",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Arc<Tensor<T>>,
}

impl<T> Param<T> {
    pub fn trainable(&self) -> bool {
        self.group != ParamGroup::Frozen
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.add_shared(name, group, Arc::new(value))
    }

    pub fn add_shared(&mut self, name: impl Into<String>, group: ParamGroup, value: Arc<Tensor<T>>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::TensorShape {
                name: p.name.clone(),
                got: value.shape().to_vec(),
                want: p.value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn count(&self, pred: impl Fn(&Param<T>) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count(|p| p.trainable())
    }

    /// SHA-256 over names, shapes and raw bytes of every frozen tensor.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable()) {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A graph plus lazily bound parameter leaves. A parameter used twice (e.g.
/// siamese encoder weights) binds to one leaf, so its gradients accumulate.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    freeze_all: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, grad: bool) -> Self {
        Ctx {
            g: if grad { Graph::new() } else { Graph::inference() },
            store,
            bound: vec![None; store.len()],
            freeze_all: false,
        }
    }

    /// Treats every parameter as constant while still recording gradients
    /// for explicit leaves.
    pub fn with_frozen_params(mut self) -> Self {
        self.freeze_all = true;
        self
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.g.leaf(Arc::clone(&p.value), p.trainable() && !self.freeze_all);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }
}

/// Deterministic per-parameter generator: the stream depends only on the
/// model seed and the parameter name, so unrelated architecture changes do
/// not perturb the initialization of shared components.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    for (k, b) in key.iter_mut().zip(seed.to_le_bytes()) {
        *k ^= b;
    }
    ChaCha8Rng::from_seed(key)
}

pub fn init_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

pub fn init_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(n.sample(rng)))
}
