//! Diagonal Gaussian latent distributions and their closed-form KL
//! divergences.

use crate::error::{Error, Result};

/// Latent distribution with independent coordinates: mean vector and
/// per-coordinate log-variance of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::invalid(format!(
                "mu has {} coordinates but log_var has {}",
                mu.len(),
                log_var.len()
            )));
        }
        Ok(DiagonalGaussian { mu, log_var })
    }

    /// Standard normal of the given dimension.
    pub fn standard(len: usize) -> Self {
        DiagonalGaussian {
            mu: vec![0.0; len],
            log_var: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Reparameterized sample: `z = mu + exp(log_var / 2) * noise`.
    pub fn sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.mu.len() {
            return Err(Error::invalid(format!(
                "noise has {} coordinates, latent has {}",
                noise.len(),
                self.mu.len()
            )));
        }
        Ok(self
            .mu
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }

    /// `KL(self || N(0, I))` in closed form:
    /// `-1/2 * sum(1 + log_var - mu^2 - exp(log_var))`.
    pub fn kl_to_standard_normal(&self) -> f64 {
        let mut acc = 0.0;
        for (m, lv) in self.mu.iter().zip(&self.log_var) {
            acc += 1.0 + lv - m * m - lv.exp();
        }
        -0.5 * acc
    }

    /// `KL(self || other)` between diagonal Gaussians:
    /// `1/2 * sum(lv_b - lv_a + (var_a + (mu_a - mu_b)^2)/var_b - 1)`.
    pub fn kl_between(&self, other: &DiagonalGaussian) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::invalid(format!(
                "KL between Gaussians of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        let mut acc = 0.0;
        for i in 0..self.len() {
            let (ma, lva) = (self.mu[i], self.log_var[i]);
            let (mb, lvb) = (other.mu[i], other.log_var[i]);
            let diff = ma - mb;
            acc += lvb - lva + (lva.exp() + diff * diff) * (-lvb).exp() - 1.0;
        }
        Ok(0.5 * acc)
    }
}
