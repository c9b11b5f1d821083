use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Gradients of a scalar loss keyed by parameter name, in lexicographic order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) -> Option<Tensor> {
        self.grads.insert(name.into(), grad)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.grads.remove(name)
    }

    /// Bitwise equality over every entry.
    pub fn bits_eq(&self, other: &GradientMap) -> bool {
        self.grads.len() == other.grads.len()
            && self
                .grads
                .iter()
                .zip(other.grads.iter())
                .all(|((ka, va), (kb, vb))| ka == kb && va.bits_eq(vb))
    }
}

impl IntoIterator for GradientMap {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.grads.into_iter()
    }
}

impl FromIterator<(String, Tensor)> for GradientMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        GradientMap {
            grads: iter.into_iter().collect(),
        }
    }
}
