//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;
use std::ops::Index;

use super::{BatchRenormConfig, BatchRenormState, Gradients, Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Tape handles of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Gradients for every parameter in store order (zeros when disconnected).
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatId(usize);

/// Named running statistics of every batch-renormalisation layer in a model.
#[derive(Debug, Clone, Default)]
pub struct RunningStats {
    names: Vec<String>,
    states: Vec<BatchRenormState>,
    pub config: BatchRenormConfig,
}

impl RunningStats {
    pub fn new(config: BatchRenormConfig) -> Self {
        RunningStats {
            config,
            ..Self::default()
        }
    }

    pub fn add(&mut self, name: impl Into<String>, channels: usize) -> Result<StatId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!(
                "duplicate statistics name {name:?}"
            )));
        }
        self.names.push(name);
        self.states.push(BatchRenormState::new(channels));
        Ok(StatId(self.states.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, id: StatId) -> &BatchRenormState {
        &self.states[id.0]
    }

    pub fn get_mut(&mut self, id: StatId) -> &mut BatchRenormState {
        &mut self.states[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BatchRenormState)> {
        self.names.iter().map(String::as_str).zip(&self.states)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut BatchRenormState)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.states.iter_mut())
    }
}

/// Everything a network forward pass needs besides its inputs.
pub struct Forward<'a> {
    pub g: &'a mut Graph,
    pub p: &'a Bound,
    pub stats: &'a mut RunningStats,
    /// Batch renormalisation uses and updates batch statistics when set.
    pub train: bool,
}

impl Forward<'_> {
    pub fn batch_renorm(
        &mut self,
        x: Var,
        gain: ParamId,
        bias: ParamId,
        stat: StatId,
    ) -> Result<Var> {
        let cfg = self.stats.config;
        let state = self.stats.get_mut(stat);
        self.g
            .batch_renorm(x, self.p[gain], self.p[bias], state, &cfg, self.train)
    }
}
