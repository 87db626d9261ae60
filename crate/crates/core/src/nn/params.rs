//! Named parameter collections shared by both model stages.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Id};

/// A flat, ordered set of named parameter arrays. Order is the registration
/// order and is stable, so optimizer state and checkpoints index by position.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> usize {
        self.add(name, ArrayD::ones(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.values
    }

    pub fn get(&self, idx: usize) -> &ArrayD<f64> {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    /// Register every parameter as a graph leaf; returns ids aligned with
    /// parameter order.
    pub fn register(&self, g: &mut Graph) -> Vec<Id> {
        self.values.iter().map(|v| g.param(v.clone())).collect()
    }

    /// Collect gradients for the ids returned by `register`, zero-filling
    /// parameters the loss did not touch.
    pub fn collect_grads(
        &self,
        grads: &[Option<ArrayD<f64>>],
        ids: &[Id],
    ) -> Vec<ArrayD<f64>> {
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                grads[id]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(self.values[i].raw_dim()))
            })
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Load values from (name, array) pairs; shapes and the full name set
    /// must match.
    pub fn load(&mut self, entries: &[(String, ArrayD<f64>)]) -> Result<()> {
        if entries.len() != self.names.len() {
            return Err(Error::Serialization(format!(
                "parameter count mismatch: expected {}, got {}",
                self.names.len(),
                entries.len()
            )));
        }
        for (name, arr) in entries {
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Serialization(format!("unknown parameter {name}")))?;
            if self.values[idx].shape() != arr.shape() {
                return Err(Error::shape(
                    format!("{:?} for {name}", self.values[idx].shape()),
                    format!("{:?}", arr.shape()),
                ));
            }
            self.values[idx] = arr.clone();
        }
        Ok(())
    }
}

/// Derive a child RNG stream from a base seed and a stream label.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    // burn a few draws so nearby seeds decorrelate
    for _ in 0..4 {
        let _: u64 = rng.gen();
    }
    rng
}
