use indexmap::IndexMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One trainable tensor with its gradient slot and Adam state.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let zeros = Tensor::zeros(value.shape());
        let (index, _) = self.entries.insert_full(
            name.clone(),
            ParamEntry {
                name,
                grad: zeros.clone(),
                first_moment: zeros.clone(),
                second_moment: zeros,
                value,
                step: 0,
            },
        );
        Ok(ParamId(index))
    }

    pub(crate) fn insert_entry(&mut self, entry: ParamEntry) -> Result<ParamId> {
        if self.entries.contains_key(&entry.name) {
            return Err(Error::Config(format!(
                "duplicate parameter name {:?}",
                entry.name
            )));
        }
        let (index, _) = self.entries.insert_full(entry.name.clone(), entry);
        Ok(ParamId(index))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.values()
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.values_mut()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .ids()
                .map(|id| tape.param(id, self.value(id).clone()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<()> {
        if grads.slots.len() != self.entries.len() {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "{} gradient slots for {} parameters",
                    grads.slots.len(),
                    self.entries.len()
                ),
            ));
        }
        for (entry, slot) in self.entries.values_mut().zip(&grads.slots) {
            if let Some(g) = slot {
                if g.shape() != entry.grad.shape() {
                    return Err(Error::shape("accumulate", entry.name.clone()));
                }
                for (a, b) in entry.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in self.entries.values_mut() {
            for g in e.grad.data_mut() {
                *g *= factor;
            }
        }
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-parameter gradients detached from any tape; sendable across threads.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub(crate) slots: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(len: usize) -> Self {
        Self {
            slots: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.slots.iter_mut().flatten() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}
