use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::array::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array,
    pub grad: Array,
}

/// Named parameters with gradient slots, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Params(format!("duplicate parameter name `{name}`")));
        }
        let grad = Array::zeros(value.shape());
        self.entries.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::Params(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries.get_mut(name).ok_or_else(|| Error::Params(format!("no parameter named `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Array> {
        self.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Array> {
        self.get(name).map(|p| &p.grad)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `g` into the gradient slot of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.len() != g.len() {
            return Err(Error::Params(format!("gradient for `{name}` has {} values, expected {}", g.len(), p.grad.len())));
        }
        for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    /// Copies every entry of `other` into `self` (names must not collide).
    pub fn extend_from(&mut self, other: &ParamStore) -> Result<()> {
        for (k, p) in other.iter() {
            self.insert(k, p.value.clone())?;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`, in order.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { entries }
    }

    /// Overwrites values of the entries present in `src` (names and shapes must match).
    pub fn load_values(&mut self, src: &ParamStore) -> Result<()> {
        for (k, p) in src.iter() {
            let dst = self.get_mut(k)?;
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Params(format!(
                    "shape of `{k}` is {:?}, source has {:?}",
                    dst.value.shape(),
                    p.value.shape()
                )));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values (gradients excluded), hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.entries {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Array::scalar(1.0)).unwrap();
        assert!(s.insert("a", Array::scalar(2.0)).is_err());
    }

    #[test]
    fn insertion_order_is_iteration_order() {
        let mut s = ParamStore::new();
        for n in ["z", "a", "m"] {
            s.insert(n, Array::scalar(0.0)).unwrap();
        }
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["z", "a", "m"]);
    }

    #[test]
    fn digest_ignores_gradients() {
        let mut s = ParamStore::new();
        s.insert("w", Array::vector(vec![1.0, 2.0])).unwrap();
        let d = s.digest();
        s.accumulate_grad("w", &[5.0, 5.0]).unwrap();
        assert_eq!(d, s.digest());
        s.get_mut("w").unwrap().value.data_mut()[0] = 1.5;
        assert_ne!(d, s.digest());
    }
}
