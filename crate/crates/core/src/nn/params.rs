use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter (or gradient) tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamMap(BTreeMap<String, Tensor>);

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    pub fn bit_eq(&self, other: &ParamMap) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Elementwise sum with a map holding the same names and shapes.
    pub fn add(&self, other: &ParamMap) -> Result<ParamMap> {
        self.check_same_layout(other)?;
        let mut out = ParamMap::new();
        for ((name, a), b) in self.0.iter().zip(other.0.values()) {
            out.insert(name.clone(), a.add(b)?);
        }
        Ok(out)
    }

    pub fn check_same_layout(&self, other: &ParamMap) -> Result<()> {
        for (name, t) in &self.0 {
            match other.0.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => return Err(Error::Shape(format!("`{name}`: {:?} vs {:?}", t.shape(), o.shape()))),
                None => return Err(Error::Shape(format!("`{name}` missing from counterpart"))),
            }
        }
        if other.0.len() != self.0.len() {
            let extra = other.0.keys().find(|k| !self.0.contains_key(*k)).unwrap();
            return Err(Error::Shape(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamMap(iter.into_iter().collect())
    }
}

impl IntoIterator for ParamMap {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}
