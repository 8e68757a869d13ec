//! Named parameter collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Ordered map from parameter path (e.g. `block0.weight`) to its tensor.
///
/// Iteration is lexicographic by name, which fixes the layout of
/// [`ParamSet::flatten`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Option<Tensor<S>> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name)
    }

    /// Like [`ParamSet::get`] but reports the missing name.
    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries.get(name).ok_or_else(|| Error::Alignment(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<S>> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.total_dim());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a parameter set with this set's names and shapes from a flat vector.
    pub fn unflatten(&self, flat: &[S]) -> Result<Self> {
        if flat.len() != self.total_dim() {
            return Err(Error::Dimension(format!(
                "flat vector has {} elements, parameter set needs {}",
                flat.len(),
                self.total_dim()
            )));
        }
        let mut offset = 0;
        let mut out = Self::new();
        for (name, t) in &self.entries {
            let n = t.len();
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(out)
    }

    /// Checks that both sets have identical names and shapes.
    ///
    /// The error names the first offending parameter in lexicographic order.
    pub fn check_aligned(&self, other: &Self) -> Result<()> {
        let first_missing = self
            .entries
            .keys()
            .find(|k| !other.entries.contains_key(*k))
            .or_else(|| other.entries.keys().find(|k| !self.entries.contains_key(*k)));
        if let Some(name) = first_missing {
            return Err(Error::Alignment(format!("parameter `{name}` present in only one set")));
        }
        for (name, t) in &self.entries {
            let o = &other.entries[name];
            if t.shape() != o.shape() {
                return Err(Error::Alignment(format!(
                    "parameter `{name}` has shape {:?} vs {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
        }
        Ok(())
    }

    /// Applies `f` entrywise to two aligned parameter sets.
    pub fn zip_with(&self, other: &Self, f: impl Fn(&Tensor<S>, &Tensor<S>) -> Result<Tensor<S>>) -> Result<Self> {
        self.check_aligned(other)?;
        let mut out = Self::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), f(t, &other.entries[name])?);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(&Tensor<S>) -> Tensor<S>) -> Self {
        Self { entries: self.entries.iter().map(|(k, v)| (k.clone(), f(v))).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

impl<S: Real> FromIterator<(String, Tensor<S>)> for ParamSet<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        Self { entries: iter.into_iter().collect() }
    }
}
