use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::ChaCha8Rng;
use crate::tape::Mat;

/// Named parameter (or buffer) arrays with deterministic, sorted path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBundle {
    entries: BTreeMap<String, Mat>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Mat) {
        self.entries.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Option<&Mat> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Mat> {
        self.entries.get_mut(path)
    }

    /// Like [`get`](Self::get) but reports the missing path.
    pub fn require(&self, path: &str) -> Result<&Mat> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    /// Number of scalar entries under paths starting with `prefix`.
    pub fn num_values_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, m)| m.len())
            .sum()
    }

    /// Concatenates all entries in path order, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for m in self.entries.values() {
            out.extend(m.iter().copied());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten): overwrites entries from `flat`.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, bundle holds {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for m in self.entries.values_mut() {
            let n = m.len();
            for (dst, src) in m.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        Ok(())
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for m in self.entries.values_mut() {
            m.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Fan-in scaled uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Adds a bias-free linear map `in_dim -> out_dim` as `{prefix}.w`.
pub fn init_weight(params: &mut ParamBundle, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, out_dim: usize) {
    params.insert(format!("{prefix}.w"), fan_in_uniform(rng, in_dim, out_dim, in_dim));
}

/// Adds a linear layer `in_dim -> out_dim` as `{prefix}.w` and `{prefix}.b`.
pub fn init_linear(
    params: &mut ParamBundle,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) {
    params.insert(format!("{prefix}.w"), fan_in_uniform(rng, in_dim, out_dim, in_dim));
    params.insert(format!("{prefix}.b"), Array2::zeros((1, out_dim)));
}
