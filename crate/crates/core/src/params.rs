//! Named parameter tensors, digests and the SGD optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::Rng;

pub type Mat = Array2<f64>;

/// Ordered map from parameter name to a 2-D tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Accumulate `delta` into the named tensor, creating it if absent.
    pub fn accumulate(&mut self, name: &str, delta: &Mat) {
        match self.tensors.get_mut(name) {
            Some(t) => *t += delta,
            None => {
                self.tensors.insert(name.to_string(), delta.clone());
            }
        }
    }

    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        for (k, v) in &other.tensors {
            if let Some(t) = self.tensors.get_mut(k) {
                t.scaled_add(scale, v);
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Tensor index and flattened little-endian payload for checkpoints.
    pub fn to_blob(&self) -> (Vec<TensorEntry>, Vec<u8>) {
        let mut index = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::with_capacity(self.num_scalars() * 8);
        for (k, v) in &self.tensors {
            index.push(TensorEntry {
                name: k.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
                offset: blob.len() / 8,
            });
            for x in v.iter() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        (index, blob)
    }

    pub fn from_blob(index: &[TensorEntry], blob: &[u8]) -> Result<Self> {
        let mut store = ParamStore::new();
        for e in index {
            let n = e.rows * e.cols;
            let start = e.offset * 8;
            let end = start + n * 8;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Data(format!("weight blob too short for {}", e.name)))?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mat = Mat::from_shape_vec((e.rows, e.cols), values)
                .map_err(|err| Error::Data(format!("{}: {err}", e.name)))?;
            store.insert(e.name.clone(), mat);
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in f64 elements.
    pub offset: usize,
}

/// He-normal initialisation for a `fan_in x fan_out` matrix.
pub fn he_normal(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Mat {
    gaussian(fan_in, fan_out, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Mat {
    let normal = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
        }
    }
}

/// SGD with momentum over a single parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: ParamStore,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: ParamStore::new(),
        }
    }

    pub fn reset(&mut self) {
        self.velocity = ParamStore::new();
    }

    pub fn velocity(&self) -> &ParamStore {
        &self.velocity
    }

    /// `v <- momentum v + g + wd p; p <- p - lr v`, with `g` pre-scaled by `grad_scale`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64, grad_scale: f64) {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.try_get(name) else { continue };
            if !self.velocity.contains(name) {
                self.velocity.insert(name.clone(), Mat::zeros(p.raw_dim()));
            }
            let v = self.velocity.get_mut(name);
            ndarray::Zip::from(&mut *v).and(&*p).and(g).for_each(|v, &p, &g| {
                *v = mu * *v + grad_scale * g + wd * p;
            });
            p.scaled_add(-lr, v);
        }
    }
}

/// Factor that brings the joint norm of `grads` down to `clip_norm`.
pub fn clip_factor(grads: &[&ParamStore], clip_norm: f64) -> f64 {
    if clip_norm <= 0.0 {
        return 1.0;
    }
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    }
}
