use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Decides whether decoupled weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl Param {
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// Ordered, named parameter collection. Order is creation order and is the
/// serialization order of checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            kind,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }
}

/// Graph leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    /// Records one leaf per parameter. Leaves require gradients only when
    /// `grad` is set and the parameter is trainable.
    pub fn new(g: &mut Graph, store: &ParamStore, grad: bool) -> Self {
        Self::with_override(g, store, grad, |_| None)
    }

    /// Like [`Bound::new`] but lets the caller substitute its own node for
    /// selected parameters (used by gradient checks).
    pub fn with_override(
        g: &mut Graph,
        store: &ParamStore,
        grad: bool,
        mut substitute: impl FnMut(ParamId) -> Option<NodeId>,
    ) -> Self {
        let nodes = store
            .iter()
            .enumerate()
            .map(|(i, p)| match substitute(ParamId(i)) {
                Some(n) => n,
                None => g.leaf(p.value.clone(), grad && p.trainable),
            })
            .collect();
        Self { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Gradients of every parameter after backward; `None` for frozen ones.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.nodes.iter().map(|&n| g.grad(n)).collect()
    }
}
