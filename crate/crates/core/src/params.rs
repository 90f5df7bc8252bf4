//! Named parameter storage and per-forward tape bindings.
//!
//! Parameters live in a `BTreeMap` so every iteration order (init, bind,
//! optimizer step, checkpoint) is deterministic.

use crate::error::{CrftError, Result};
use crate::tensor::{Tape, Tensor, TensorId};
use std::collections::BTreeMap;

/// All learnable tensors of a model, keyed by hierarchical names
/// ("enc.stem.w", "refine.attn.q.w", ...).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) {
        tensor.requires_grad = true;
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate param {name}");
        self.map.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    /// Enter every parameter on a tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let ids = self
            .map
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor)))
            .collect();
        ParamBinding { ids }
    }

    /// Copy gradients out of the tape into each tensor's grad slot.
    /// Parameters off the loss path get a zero gradient.
    pub fn harvest(&mut self, tape: &Tape, binding: &ParamBinding) -> Result<()> {
        for (name, tensor) in self.map.iter_mut() {
            let id = binding.ids.get(name).ok_or_else(|| {
                CrftError::Autodiff(format!("binding is missing parameter {name}"))
            })?;
            tensor.grad = Some(match tape.grad(*id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.numel()],
            });
        }
        Ok(())
    }
}

/// Tape ids of every bound parameter for one forward pass.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    ids: BTreeMap<String, TensorId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}
