//! Named, seeded random streams.
//!
//! A stream is identified by `(seed, label)`; the pair is hashed into a
//! ChaCha key so unrelated consumers never share draws and adding a new
//! consumer never perturbs existing ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub label: String,
}

impl RngSeed {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        Self { seed, label: label.into() }
    }

    /// Derives a child seed with `label` appended to this one's label.
    pub fn child(&self, label: impl AsRef<str>) -> Self {
        Self { seed: self.seed, label: format!("{}/{}", self.label, label.as_ref()) }
    }

    pub fn stream(&self) -> Stream {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        Stream(ChaCha8Rng::from_seed(key))
    }
}

/// A deterministic random stream.
#[derive(Clone, Debug)]
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        use rand::seq::SliceRandom;
        xs.shuffle(&mut self.0);
    }

    /// Samples an index proportional to non-negative `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.normal()).collect()
    }

    /// Xavier/Glorot-uniform initialisation for a `rows x cols` weight.
    pub fn xavier(&mut self, rows: usize, cols: usize) -> Matrix {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.uniform_range(-bound, bound)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized above")
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_vec(rows, cols, self.normal_vec(rows * cols, std)).expect("sized above")
    }
}
