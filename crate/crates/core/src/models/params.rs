use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    map: IndexMap<String, Tensor>,
}

/// Tape handles for every parameter, in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, slot: usize) -> Var {
        self.0[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let (slot, prev) = self.map.insert_full(name.into(), t);
        debug_assert!(prev.is_none(), "duplicate parameter name");
        slot
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn slot(&self, slot: usize) -> &Tensor {
        &self.map[slot]
    }

    pub fn slot_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.map[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.map.values_mut()
    }

    /// Records every parameter on the tape as a leaf, tracked according to
    /// its own `requires_grad` flag.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.map.values().map(|t| tape.leaf(t)).collect())
    }

    /// Records every parameter as a constant; nothing flows back.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.map.values().map(|t| tape.constant(t.clone())).collect())
    }

    /// Adds the tape's leaf gradients into each tracked parameter.
    pub fn accumulate(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        if bound.0.len() != self.map.len() {
            return Err(Error::Contract("binding does not belong to this parameter set".into()));
        }
        for (t, &v) in self.map.values_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.map.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.map.values_mut().for_each(|t| t.set_requires_grad(on));
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}
