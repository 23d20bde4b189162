use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Named model weights. Initialisation of each entry depends only on the
/// store's seed and the entry's name.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<T: Scalar> Parameters<T> {
    pub fn new(seed: u64) -> Self {
        Self { tensors: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name.to_owned(), t);
        Ok(())
    }

    /// Kaiming-uniform weight: `U(-b, b)` with `b = sqrt(6 / fan_in)`,
    /// fan-in being the product of all but the leading dim.
    pub fn kaiming(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)));
        self.insert(name, t)
    }

    /// Identity-like convolution `[cout,cin,k,k]`: one at the centre tap of
    /// `(i,i)` for `i < min(cout, cin)`, zero elsewhere.
    pub fn dirac(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
        let mut t = Tensor::zeros(&[cout, cin, k, k]);
        let centre = (k / 2) * k + k / 2;
        for i in 0..cout.min(cin) {
            t.data_mut()[(i * cin + i) * k * k + centre] = T::one();
        }
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    /// Copies every entry of `other` into `self`, replacing same-named ones.
    pub fn merge_from(&mut self, other: &Parameters<T>) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(), seed: self.seed }
    }

    /// SHA-256 over names, shapes and raw values of the selected entries.
    pub fn checksum(&self, select: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.tensors.iter().filter(|(k, _)| select(k)) {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Registers every entry as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self.tensors.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable(k)))).collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`Parameters`] store.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for graph nodes created by the caller, e.g. grad-check inputs.
    pub fn from_vars<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self { vars: pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::InvalidArgument(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights_regardless_of_order() {
        let mut a = Parameters::<f32>::new(7);
        a.kaiming("x.w", &[4, 3, 3, 3]).unwrap();
        a.kaiming("y.w", &[2, 5]).unwrap();
        let mut b = Parameters::<f32>::new(7);
        b.kaiming("y.w", &[2, 5]).unwrap();
        b.kaiming("x.w", &[4, 3, 3, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(|_| true), b.checksum(|_| true));
        let mut c = Parameters::<f32>::new(8);
        c.kaiming("x.w", &[4, 3, 3, 3]).unwrap();
        assert_ne!(a.get("x.w").unwrap(), c.get("x.w").unwrap());
    }

    #[test]
    fn kaiming_bound_and_unique_names() {
        let mut p = Parameters::<f32>::new(1);
        p.kaiming("w", &[8, 6]).unwrap();
        let bound = (6.0f32 / 6.0).sqrt();
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(p.zeros("w", &[1]).is_err());
    }
}
