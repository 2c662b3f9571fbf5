//! Named parameter storage.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor4<T>,
    /// Buffers (batchnorm running statistics) are stored and checkpointed
    /// but never touched by the optimizer.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Ids are insertion indices, so
/// building the same architecture twice yields the same order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor4<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// He-normal initialised convolution weight, std `sqrt(2 / fan_in)` with
    /// `fan_in = dims[1] * dims[2] * dims[3]`.
    pub fn add_he(&mut self, name: impl Into<String>, dims: [usize; 4], rng: &mut impl Rng) -> Result<ParamId> {
        let fan_in = (dims[1] * dims[2] * dims[3]).max(1);
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..dims.iter().product::<usize>())
            .map(|_| T::from_f64_lossy(normal.sample(rng)))
            .collect();
        self.add(name, Tensor4::from_vec(dims, data)?, true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces a value, keeping the stored shape.
    pub fn set(&mut self, id: ParamId, value: Tensor4<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.dims() != value.dims() {
            return Err(Error::shape(
                "param",
                format!("{}: {:?} vs {:?}", e.name, e.value.dims(), value.dims()),
            ));
        }
        e.value = value;
        Ok(())
    }

    /// Copies every same-named, same-shaped entry from `other`. Returns the
    /// number of entries copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|o| o.name == e.name) {
                if src.value.dims() == e.value.dims() {
                    e.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}
