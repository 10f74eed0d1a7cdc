use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// Something owning named trainable arrays.
pub trait Parameterized {
    fn named_parameters(&self) -> Vec<(String, &Tensor)>;

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Trainable parameters recorded as leaves on one tape, keyed by name.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn new() -> Self {
        Self {
            vars: BTreeMap::new(),
        }
    }

    /// Records every parameter of `owner` as a gradient-tracked leaf.
    pub fn bind(&mut self, tape: &'t Tape, owner: &dyn Parameterized) {
        for (name, t) in owner.named_parameters() {
            self.vars.insert(name, tape.param(t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Default for BoundParams<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// SHA-256 over the little-endian bytes of a sequence of named arrays.
pub fn digest_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
