use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const NOISE_DECAY: f64 = 0.99;
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Per-level running mean and variance of encoder outputs (level 0 =
/// token embeddings).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    pub updates: Vec<u64>,
}

impl NoiseStats {
    pub fn new(dims: &[usize]) -> Self {
        Self {
            mean: dims.iter().map(|&d| vec![0.0; d]).collect(),
            var: dims.iter().map(|&d| vec![1.0; d]).collect(),
            updates: vec![0; dims.len()],
        }
    }

    pub fn levels(&self) -> usize {
        self.mean.len()
    }

    /// Folds the rows of `x` into level `level`; the first update sets the
    /// statistics directly.
    pub fn update<T: Scalar>(&mut self, level: usize, x: &Tensor<T>) -> Result<()> {
        let d = self.mean[level].len();
        if x.cols() != d || x.rows() == 0 {
            return Err(Error::shape(
                "noise update",
                format!("{:?} for width {d}", x.shape()),
            ));
        }
        let n = x.rows() as f64;
        let mut mu = vec![0.0; d];
        for r in 0..x.rows() {
            for (m, v) in mu.iter_mut().zip(x.row_slice(r)) {
                *m += v.as_f64() / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row_slice(r)).zip(&mu) {
                let e = v.as_f64() - m;
                *s += e * e / n;
            }
        }
        if self.updates[level] == 0 {
            self.mean[level] = mu;
            self.var[level] = var;
        } else {
            for (a, b) in self.mean[level].iter_mut().zip(mu) {
                *a = NOISE_DECAY * *a + (1.0 - NOISE_DECAY) * b;
            }
            for (a, b) in self.var[level].iter_mut().zip(var) {
                *a = NOISE_DECAY * *a + (1.0 - NOISE_DECAY) * b;
            }
        }
        self.updates[level] += 1;
        Ok(())
    }

    pub fn std(&self, level: usize) -> Vec<f64> {
        self.var[level]
            .iter()
            .map(|v| v.sqrt().max(SIGMA_FLOOR))
            .collect()
    }

    /// `n` rows of elementwise `N(μ, σ)` noise for `level`.
    pub fn sample<T: Scalar, R: Rng>(
        &self,
        level: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        if self.updates[level] == 0 {
            return Err(Error::Validation(format!(
                "noise statistics of level {level} were never updated"
            )));
        }
        let sd = self.std(level);
        let mu = &self.mean[level];
        let data = (0..n)
            .flat_map(|_| {
                mu.iter()
                    .zip(&sd)
                    .map(|(&m, &s)| T::lit(m + s * rng.sample::<f64, _>(StandardNormal)))
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::matrix(n, mu.len(), data)
    }
}
