use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Rc<Tensor>,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameters in insertion order, each with a gradient slot of the
/// same shape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Rc::new(value),
            grad,
            trainable,
        });
        ParamId(self.entries.len() - 1)
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

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Rc<Tensor> {
        &self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.id(name)
            .map(|id| &*self.entries[id.0].value)
            .ok_or_else(|| Error::MissingArtifact(format!("parameter `{name}`")))
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let e = &mut self.entries[id.0];
        if !e.trainable {
            return;
        }
        for (slot, v) in e.grad.data_mut().iter_mut().zip(g.data()) {
            *slot += v;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// FNV-1a over names, shapes and value bits; used to prove that frozen
    /// parameters were not modified.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for e in &self.entries {
            h.bytes(e.name.as_bytes());
            for &d in e.value.shape() {
                h.bytes(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.bytes(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
