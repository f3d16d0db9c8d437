//! Named parameter storage plus the freeze bookkeeping used for
//! parameter-efficient training.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{HctError, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All trainable tensors of a model, addressed by dotted names such as
/// `hram.phase.mlp_ij.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(HctError::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        self.frozen.push(false);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
        self.tensors[id.0].set_requires_grad(!frozen);
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn tunable_numel(&self) -> usize {
        self.ids().filter(|&id| !self.is_frozen(id)).map(|id| self.tensor(id).numel()).sum()
    }

    /// Moves the gradients of every bound, trainable parameter from the graph
    /// into the store's gradient slots.
    pub fn absorb_grads(&mut self, graph: &Graph) -> Result<()> {
        for (id, var) in graph.param_bindings() {
            if self.frozen[id.0] {
                continue;
            }
            if let Some(g) = graph.grad(var) {
                self.tensors[id.0].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Partition of the parameters into frozen and tunable sets, written as glob
/// patterns over parameter names. `tunable` overrides `frozen`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    #[serde(default)]
    pub frozen: Vec<String>,
    #[serde(default)]
    pub tunable: Vec<String>,
}

/// Parameter accounting for one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub tunable: usize,
    pub fraction: f64,
}

impl FreezePlan {
    pub fn nothing() -> Self {
        Self::default()
    }

    pub fn everything() -> Self {
        Self { frozen: vec!["*".into()], tunable: vec![] }
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty() && self.tunable.is_empty()
    }

    fn compile(patterns: &[String], store: &ParamStore) -> Result<Vec<glob::Pattern>> {
        patterns
            .iter()
            .map(|p| {
                let pat =
                    glob::Pattern::new(p).map_err(|e| HctError::Config(format!("bad freeze pattern `{p}`: {e}")))?;
                if !store.ids().any(|id| pat.matches(store.name(id))) {
                    return Err(HctError::Config(format!("freeze pattern `{p}` matches no parameter")));
                }
                Ok(pat)
            })
            .collect()
    }

    /// Marks parameters frozen or tunable. Every pattern must match at least
    /// one parameter.
    pub fn apply(&self, store: &mut ParamStore) -> Result<ParamCount> {
        let frozen = Self::compile(&self.frozen, store)?;
        let tunable = Self::compile(&self.tunable, store)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id);
            let freeze = frozen.iter().any(|p| p.matches(name)) && !tunable.iter().any(|p| p.matches(name));
            store.set_frozen(id, freeze);
        }
        Ok(count_params(store))
    }
}

pub fn count_params(store: &ParamStore) -> ParamCount {
    let total = store.numel();
    let tunable = store.tunable_numel();
    ParamCount { total, tunable, fraction: if total == 0 { 0.0 } else { tunable as f64 / total as f64 } }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("trunk.a", Tensor::zeros(&[2, 3])).unwrap();
        s.add("trunk.b", Tensor::zeros(&[4])).unwrap();
        s.add("hram.phase.s_ada.down", Tensor::zeros(&[3])).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.add("trunk.a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn freeze_everything_and_nothing() {
        let mut s = store();
        let c = FreezePlan::everything().apply(&mut s).unwrap();
        assert_eq!((c.total, c.tunable, c.fraction), (13, 0, 0.0));
        let c = FreezePlan::nothing().apply(&mut s).unwrap();
        assert_eq!((c.tunable, c.fraction), (13, 1.0));
    }

    #[test]
    fn tunable_overrides_frozen() {
        let mut s = store();
        let plan = FreezePlan { frozen: vec!["*".into()], tunable: vec!["*.s_ada.*".into()] };
        let c = plan.apply(&mut s).unwrap();
        assert_eq!(c.tunable, 3);
        assert!(s.is_frozen(s.id("trunk.a").unwrap()));
        assert!(!s.is_frozen(s.id("hram.phase.s_ada.down").unwrap()));
    }

    #[test]
    fn unknown_pattern_is_config_error() {
        let mut s = store();
        let plan = FreezePlan { frozen: vec!["decoder.*".into()], tunable: vec![] };
        assert!(matches!(plan.apply(&mut s), Err(HctError::Config(_))));
    }
}
