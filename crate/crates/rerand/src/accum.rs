//! Streaming moment accumulators.
//!
//! Monte Carlo loops shard work across threads; each shard owns an
//! accumulator and shards are merged in a fixed order, so totals are
//! independent of thread count. Updates use Welford-style recurrences to
//! stay stable over millions of draws.

use crate::matrix::Matrix;

/// Scalar running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanVarAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl MeanVarAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &MeanVarAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / total as f64;
        self.m2 += other.m2
            + delta * delta * (self.count as f64) * (other.count as f64) / total as f64;
        self.count = total;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance, divisor n-1.
    pub fn sample_variance(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        self.m2 / (self.count - 1) as f64
    }

    /// Standard error of the mean.
    pub fn standard_error(&self) -> f64 {
        (self.sample_variance() / self.count as f64).sqrt()
    }
}

/// Weighted running mean vector and second central moment matrix.
///
/// `covariance` divides by total weight, so feeding every point of a finite
/// distribution with its probability as weight yields exact population
/// moments.
#[derive(Debug, Clone)]
pub struct WeightedMoments {
    dim: usize,
    weight: f64,
    mean: Vec<f64>,
    m2: Matrix,
}

impl WeightedMoments {
    pub fn new(dim: usize) -> Self {
        WeightedMoments {
            dim,
            weight: 0.0,
            mean: vec![0.0; dim],
            m2: Matrix::zeros(dim, dim),
        }
    }

    pub fn push(&mut self, x: &[f64], w: f64) {
        debug_assert_eq!(x.len(), self.dim);
        if w <= 0.0 {
            return;
        }
        let old_weight = self.weight;
        self.weight += w;
        let scale = w / self.weight;
        // m2 gains (w * old_weight / new_weight) * d d'; symmetric rank-1.
        let coef = w * old_weight / self.weight;
        for i in 0..self.dim {
            let di = x[i] - self.mean[i];
            for j in 0..=i {
                let dj = x[j] - self.mean[j];
                let upd = coef * di * dj;
                let v = self.m2.get(i, j) + upd;
                self.m2.set(i, j, v);
                if i != j {
                    self.m2.set(j, i, v);
                }
            }
        }
        for i in 0..self.dim {
            self.mean[i] += scale * (x[i] - self.mean[i]);
        }
    }

    pub fn merge(&mut self, other: &WeightedMoments) {
        debug_assert_eq!(self.dim, other.dim);
        if other.weight <= 0.0 {
            return;
        }
        if self.weight <= 0.0 {
            *self = other.clone();
            return;
        }
        let total = self.weight + other.weight;
        let coef = self.weight * other.weight / total;
        for i in 0..self.dim {
            let di = other.mean[i] - self.mean[i];
            for j in 0..=i {
                let dj = other.mean[j] - self.mean[j];
                let v = self.m2.get(i, j) + other.m2.get(i, j) + coef * di * dj;
                self.m2.set(i, j, v);
                if i != j {
                    self.m2.set(j, i, v);
                }
            }
        }
        let scale = other.weight / total;
        for i in 0..self.dim {
            self.mean[i] += scale * (other.mean[i] - self.mean[i]);
        }
        self.weight = total;
    }

    pub fn total_weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Second central moment with divisor = total weight.
    pub fn covariance(&self) -> Matrix {
        let mut out = self.m2.clone();
        if self.weight > 0.0 {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    out.set(i, j, out.get(i, j) / self.weight);
                }
            }
        }
        out
    }
}
