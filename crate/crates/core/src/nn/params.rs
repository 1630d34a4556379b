use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Id of the `i`-th entry in insertion order.
    pub fn from_index(i: usize) -> Self {
        Self(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: ArrayD<T>,
    /// Buffers (batch-norm running statistics) are stored but not optimized.
    pub trainable: bool,
}

/// Flat, named storage for every tensor of a network.
///
/// Layers hold [`ParamId`]s rather than tensors, so two sub-networks that
/// reference the same ids share storage.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars among entries whose name starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names and bit patterns of every entry.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update(T::to_le_bytes_vec(e.value.as_slice().expect("contiguous parameter")));
        }
        format!("{:x}", h.finalize())
    }

    /// Overwrites every entry from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &[(String, ArrayD<T>)]) -> Result<()> {
        for e in &mut self.entries {
            let (_, v) = other.iter().find(|(n, _)| *n == e.name).ok_or_else(|| {
                Error::Tensors(format!("missing tensor `{}` in checkpoint", e.name))
            })?;
            if v.shape() != e.value.shape() {
                return Err(Error::Tensors(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    e.name,
                    v.shape(),
                    e.value.shape()
                )));
            }
            e.value.assign(v);
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Gradients<T> {
        Gradients {
            grads: self
                .entries
                .iter()
                .map(|e| ArrayD::zeros(IxDyn(e.value.shape())))
                .collect(),
        }
    }
}

/// Accumulated gradients, parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    #[inline]
    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.grads[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<T>> {
        self.grads.iter()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    /// Euclidean norm over all gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| *v == T::zero()))
    }
}
