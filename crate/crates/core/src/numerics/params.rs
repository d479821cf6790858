use std::collections::BTreeSet;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Real, Tensor2D};
use crate::error::{Error, Result};

/// Index of a parameter inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether a store's parameters may receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StoreKind {
    Frozen,
    Trainable,
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    kind: StoreKind,
    names: Vec<String>,
    tensors: Vec<Tensor2D<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(kind: StoreKind) -> Self {
        Self {
            kind,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor2D<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = Tensor2D::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..=bound)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor2D::zeros(rows, cols))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamId {
        self.add(name, Tensor2D::filled(rows, cols, T::lit(value)))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor2D<T> {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2D<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor2D<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn name_set(&self) -> BTreeSet<String> {
        self.names.iter().cloned().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor2D::len).sum()
    }

    /// Replace every tensor from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &[(String, Tensor2D<T>)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::format(
                "weights",
                format!("expected {} tensors, found {}", self.len(), other.len()),
            ));
        }
        for (name, tensor) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::format("weights", format!("unknown parameter {name}")))?;
            if self.get(id).shape() != tensor.shape() {
                return Err(Error::format(
                    "weights",
                    format!(
                        "{name}: shape {:?} does not match {:?}",
                        tensor.shape(),
                        self.get(id).shape()
                    ),
                ));
            }
            *self.get_mut(id) = tensor.clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor2D<T>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        digest_tensors(self.names.iter().map(String::as_str).zip(&self.tensors))
    }
}

fn digest_tensors<'t, T: Real + 't>(items: impl Iterator<Item = (&'t str, &'t Tensor2D<T>)>) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in items {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((t.rows() as u64).to_le_bytes());
        hasher.update((t.cols() as u64).to_le_bytes());
        buf.clear();
        for &v in t.data() {
            v.le_bytes(&mut buf);
        }
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}

/// Same digest as [`ParamStore::digest`] for a detached snapshot.
pub fn digest_named<T: Real>(blocks: &[(String, Tensor2D<T>)]) -> String {
    digest_tensors(blocks.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Gradients for one store, aligned with its parameter ids.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor2D<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor2D<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor2D<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor2D::is_finite)
    }
}
