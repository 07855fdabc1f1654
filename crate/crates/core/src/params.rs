//! Named trainable parameters and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, NodeId, Tensor};

/// Insertion-ordered parameter set. Order matters: it fixes iteration order
/// for optimizers, checksums and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; parameter layouts are fixed at build time.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor));
    }

    pub fn gaussian<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], sigma: f64, rng: &mut R) {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("consistent shape"));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter as a named trainable graph input.
    pub fn bind(&self, g: &mut Graph) -> Result<HashMap<String, NodeId>> {
        self.entries
            .iter()
            .map(|(n, t)| Ok((n.clone(), g.input(n, t.clone().with_grad())?)))
            .collect()
    }

    /// Registers every parameter as a constant (frozen) graph node.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<HashMap<String, NodeId>> {
        self.entries
            .iter()
            .map(|(n, t)| Ok((n.clone(), g.constant(t.clone())?)))
            .collect()
    }

    /// Order-sensitive hash of the exact bit patterns (FNV-1a).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.entries {
            for b in name.bytes().map(u64::from).chain(t.data().iter().map(|x| x.to_bits())) {
                h ^= b;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.entries
            .iter()
            .map(|(n, t)| ParamRecord {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Rebuilds a parameter set, checking names and shapes against `layout`.
    pub fn from_records(records: Vec<ParamRecord>, layout: &Params) -> Result<Self> {
        if records.len() != layout.len() {
            return Err(Error::validation(
                "params",
                format!("expected {} tensors, found {}", layout.len(), records.len()),
            ));
        }
        let mut out = Params::new();
        for (rec, (name, t)) in records.into_iter().zip(layout.iter()) {
            if rec.name != name || rec.shape != t.shape() {
                return Err(Error::validation(
                    &format!("params.{}", rec.name),
                    format!("expected {name} with shape {:?}, found shape {:?}", t.shape(), rec.shape),
                ));
            }
            let tensor = Tensor::new(rec.shape, rec.data)
                .map_err(|e| Error::validation(&format!("params.{name}"), e.to_string()))?;
            if !tensor.is_finite() {
                return Err(Error::validation(&format!("params.{name}"), "non-finite value"));
            }
            out.insert(name, tensor);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per name,
/// and each name counts its own steps so a parameter that first receives
/// gradients late still gets a correctly debiased first update.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    moments: HashMap<String, Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Updates every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, t) in params.entries.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let state = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            });
            state.step += 1;
            let c1 = 1.0 - beta1.powi(state.step);
            let c2 = 1.0 - beta2.powi(state.step);
            let (m, v) = (&mut state.m, &mut state.v);
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *p -= update;
            }
        }
    }
}
