use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub const fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// He fan-in normal initialisation: `N(0, 2/fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// Adds a `k×k×cin×cout` conv kernel (`{name}.w`) and zero bias (`{name}.b`).
pub fn add_conv<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    rng: &mut R,
) {
    ps.insert(format!("{name}.w"), he_normal(&[k, k, cin, cout], k * k * cin, rng));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Adds an `fin×fout` dense layer (`{name}.w`, `{name}.b`) with He init.
pub fn add_linear<R: Rng + ?Sized>(
    ps: &mut ParamSet,
    name: &str,
    fin: usize,
    fout: usize,
    rng: &mut R,
) {
    ps.insert(format!("{name}.w"), he_normal(&[fin, fout], fin, rng));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[fout]));
}
