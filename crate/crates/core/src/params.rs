use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A named tensor that an optimizer may update.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters owned by one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies every parameter value, in id order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.value.data().to_vec()).collect()
    }

    /// Copies every value of `other` into the parameter of the same name.
    /// Names and shapes must match exactly; trainable flags are kept.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        for p in &other.params {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unknown parameter `{}`", p.name)))?;
            let target = &mut self.params[id.0];
            if target.value.shape() != p.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    p.name,
                    p.value.shape(),
                    target.value.shape()
                )));
            }
            target.value.data_mut().copy_from_slice(p.value.data());
        }
        Ok(())
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (p, values) in self.params.iter_mut().zip(snapshot) {
            p.value.data_mut().copy_from_slice(values);
        }
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for p in &self.params {
            h.write(p.name.as_bytes());
            for &e in p.value.shape() {
                h.write(&(e as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    /// Fingerprint restricted to parameters whose name starts with `prefix`.
    pub fn fingerprint_prefix(&self, prefix: &str) -> u64 {
        let mut h = Fnv::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.write(p.name.as_bytes());
            for v in p.value.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Gradient accumulation buffers, one per trainable parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Zeroed buffers for every trainable parameter of `store`.
    pub fn zeros_for(store: &ParamStore) -> Self {
        let bufs = store
            .params
            .iter()
            .map(|p| p.trainable.then(|| vec![0.0; p.value.len()]))
            .collect();
        Self { bufs }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        self.bufs.get_mut(id.0).and_then(|b| b.as_deref_mut())
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.bufs.iter_mut().flatten().flatten() {
            *v *= factor;
        }
    }

    pub fn clear(&mut self) {
        for v in self.bufs.iter_mut().flatten().flatten() {
            *v = 0.0;
        }
    }

    /// Elementwise sum with another accumulator built for the same store.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.bufs.iter().flatten().flatten().map(|v| v * v).sum())
    }

    /// Rescales so the global L2 norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }
}
