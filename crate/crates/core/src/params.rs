//! Named parameter storage and binding onto a [`Graph`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;
use crate::tensor::Tensor;

/// A stored parameter: full precision, or a frozen 4-bit packed matrix that is
/// dequantized when bound.
#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    Dense(Tensor),
    Nf4(QuantizedTensor),
}

impl Param {
    pub fn numel(&self) -> usize {
        match self {
            Param::Dense(t) => t.numel(),
            Param::Nf4(q) => q.numel(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Param::Dense(t) => t.shape(),
            Param::Nf4(q) => q.shape(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Param::Dense(t) if t.requires_grad())
    }

    /// Full-precision value (dequantized for packed entries).
    pub fn to_dense(&self) -> Tensor {
        match self {
            Param::Dense(t) => t.clone(),
            Param::Nf4(q) => q.dequantize(),
        }
    }
}

/// Parameters keyed by name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.map.insert(name.into(), param);
    }

    pub fn insert_dense(&mut self, name: impl Into<String>, t: Tensor) {
        self.insert(name, Param::Dense(t));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.map.remove(name)
    }

    pub fn dense(&self, name: &str) -> Result<&Tensor> {
        match self.map.get(name) {
            Some(Param::Dense(t)) => Ok(t),
            _ => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn dense_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.map.get_mut(name) {
            Some(Param::Dense(t)) => Ok(t),
            _ => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.map.values_mut() {
            if let Param::Dense(t) = p {
                t.set_requires_grad(trainable);
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Param::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.map.values().filter(|p| p.is_trainable()).map(Param::numel).sum()
    }

    /// Records every parameter as a leaf. With `track_grads` false all leaves
    /// are constants, which is what inference wants.
    pub fn bind(&self, g: &mut Graph, bound: &mut Bound, track_grads: bool) -> Result<()> {
        for (name, p) in &self.map {
            let t = p.to_dense();
            let var = if track_grads { g.leaf(t)? } else { g.constant(t)? };
            bound.insert(name.clone(), var);
        }
        Ok(())
    }
}

/// Parameter name → graph variable for one trace.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound leaf that received one, keyed by name.
    pub fn collect_grads(&self, g: &mut Graph) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &var) in &self.vars {
            if let Some(gr) = g.take_grad(var) {
                out.insert(name.clone(), gr);
            }
        }
        out
    }
}

/// Exact trainable / frozen element tallies.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamReport {
    pub trainable_count: usize,
    pub frozen_count: usize,
    pub groups: Vec<ParamGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamReport {
    pub fn from_groups(groups: &[(&str, &ParamStore)]) -> Self {
        let groups: Vec<ParamGroup> = groups
            .iter()
            .map(|(name, store)| {
                let trainable = store.trainable_numel();
                ParamGroup {
                    name: name.to_string(),
                    trainable,
                    frozen: store.numel() - trainable,
                }
            })
            .collect();
        Self {
            trainable_count: groups.iter().map(|g| g.trainable).sum(),
            frozen_count: groups.iter().map(|g| g.frozen).sum(),
            groups,
        }
    }

    pub fn total(&self) -> usize {
        self.trainable_count + self.frozen_count
    }
}
