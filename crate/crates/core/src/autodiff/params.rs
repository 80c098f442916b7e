use std::ops::Index;

use super::{Tensor, TensorError, VarId};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
///
/// Models hold [`ParamId`]s; values live here so that online and shadow
/// copies of the same model can share one structure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id.0].data_mut()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// The graph variables a [`ParamStore`] was bound to on one tape.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<VarId>,
}

impl Binding {
    pub(crate) fn new(vars: Vec<VarId>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[VarId] {
        &self.vars
    }
}

impl Index<ParamId> for Binding {
    type Output = VarId;

    fn index(&self, id: ParamId) -> &VarId {
        &self.vars[id.0]
    }
}
