//! Named parameter storage and its binding onto a [`Graph`].

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// Ordered map of named tensors. Iteration order is the lexicographic name
/// order, which keeps checkpoints and optimizer updates deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Drop every tensor whose name starts with one of `prefixes`.
    pub fn strip_prefixes(&mut self, prefixes: &[&str]) {
        self.map.retain(|k, _| !prefixes.iter().any(|p| k.starts_with(p)));
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k.starts_with(prefix))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// A graph plus lazily bound parameters. Parameters are copied into the
/// graph on first use only, so modules that are skipped in a forward pass
/// never appear in it.
pub struct Tape<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    trainable: &'a BTreeSet<String>,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: &'a BTreeSet<String>) -> Self {
        Tape {
            graph: Graph::new(),
            store,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Bind (once) and return the named parameter.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let v = if self.trainable.contains(name) {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    /// Gradients for every trainable parameter in the store. Parameters the
    /// forward pass never touched get an explicit zero tensor.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = BTreeMap::new();
        for name in self.trainable {
            let Some(t) = self.store.get(name) else { continue };
            let g = self
                .bound
                .get(name)
                .and_then(|&v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}
