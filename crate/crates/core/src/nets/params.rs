//! Named parameter tensors with a trainable/frozen flag.

use std::collections::{BTreeMap, HashMap};

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// How [`ParamStore::bind`] inserts parameters into a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable parameters become leaves, frozen ones constants.
    Train,
    /// Everything becomes a constant.
    Frozen,
}

/// Graph handles for every parameter of one store.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter().filter(|(_, p)| p.trainable).map(|(k, _)| k.to_string()).collect()
    }

    pub fn n_trainable(&self) -> usize {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Copy containing only the frozen parameters.
    pub fn frozen_part(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(_, p)| !p.trainable)
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph, mode: BindMode) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if p.trainable && mode == BindMode::Train {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }
}

pub(crate) fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}
