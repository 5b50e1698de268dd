//! Named parameter storage and the per-step binding of parameters into a
//! [`Graph`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Backbone weights: never updated.
    Frozen,
    /// Updated by AdamW.
    Weight,
    /// Continuous expert rank in `[1, max]`, updated by Nesterov SGD.
    Rank { max: usize },
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            kind,
            trainable: kind != ParamKind::Frozen,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.lookup(name).map(|id| self.get(id))
    }

    /// Replaces a value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn rank_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| matches!(p.kind, ParamKind::Rank { .. }))
            .map(|(id, _)| id)
            .collect()
    }

    /// Current value of a rank parameter.
    pub fn rank(&self, id: ParamId) -> f64 {
        self.params[id.0].value.data()[0]
    }

    pub fn ranks(&self) -> Vec<f64> {
        self.rank_ids().into_iter().map(|id| self.rank(id)).collect()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Switches used by tests to isolate parts of the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// When false every adapter branch contributes nothing (plain backbone).
    pub adapters: bool,
    /// When false the sinusoidal position encoding is not added.
    pub position_encoding: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            adapters: true,
            position_encoding: true,
        }
    }
}

/// One forward/backward evaluation: a fresh graph with store parameters
/// bound lazily as leaves.
pub struct Ctx<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    pub opts: ForwardOptions,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, opts: ForwardOptions) -> Self {
        Ctx {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            opts,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph leaf for `id`; trainable parameters become differentiable leaves.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable {
            self.graph.param(p.name.clone(), p.value.clone())
        } else {
            self.graph.named_constant(p.name.clone(), p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradient for every trainable parameter, zeros for those the loss did
    /// not reach.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let g = self.bound[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
                (id, g)
            })
            .collect()
    }
}
