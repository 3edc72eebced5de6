//! Random Fourier features for a Gaussian kernel.
//!
//! `φ(h) = √(2/D) · cos(W h + b)` with `W_ij ~ N(0, 1/ℓ²)` and
//! `b_i ~ U[0, 2π)`, so that `φ(h)ᵀφ(h') ≈ exp(-‖h - h'‖² / (2ℓ²))`.
//! The map is frozen after construction.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_stream, dot, Matrix};

pub const DEFAULT_FEATURES: usize = 1024;
pub const DEFAULT_KERNEL_SCALE: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffMap {
    weights: Matrix,
    phases: Vec<f64>,
    kernel_scale: f64,
}

impl RffMap {
    pub fn new(input_dim: usize, features: usize, kernel_scale: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || features == 0 {
            return Err(Error::invalid("random feature map needs positive dimensions"));
        }
        if !(kernel_scale > 0.0) || !kernel_scale.is_finite() {
            return Err(Error::invalid(format!("kernel scale must be positive, got {kernel_scale}")));
        }
        let mut rng = derive_stream(seed, "rff");
        let inv_scale = 1.0 / kernel_scale;
        let weights = Matrix::from_fn(features, input_dim, |_, _| rng.normal() * inv_scale);
        let phases = (0..features).map(|_| 2.0 * PI * rng.uniform()).collect();
        Ok(RffMap {
            weights,
            phases,
            kernel_scale,
        })
    }

    /// Rebuilds a map from stored arrays (container loading, tests).
    pub fn from_parts(weights: Matrix, phases: Vec<f64>, kernel_scale: f64) -> Result<Self> {
        if phases.len() != weights.rows() {
            return Err(Error::shape("RffMap::from_parts", weights.rows(), phases.len()));
        }
        Ok(RffMap {
            weights,
            phases,
            kernel_scale,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn features(&self) -> usize {
        self.weights.rows()
    }

    pub fn kernel_scale(&self) -> f64 {
        self.kernel_scale
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    fn amplitude(&self) -> f64 {
        (2.0 / self.features() as f64).sqrt()
    }

    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.input_dim() {
            return Err(Error::shape("RffMap::apply", self.input_dim(), h.len()));
        }
        let a = self.amplitude();
        Ok((0..self.features())
            .map(|i| a * (dot(self.weights.row(i), h) + self.phases[i]).cos())
            .collect())
    }

    /// Pre-activations `Z = H Wᵀ + b` for a batch (rows of `h`).
    pub fn pre_activations(&self, h: &Matrix) -> Result<Matrix> {
        let mut z = h.matmul_t(&self.weights).map_err(|_| {
            Error::shape("RffMap::apply_batch", self.input_dim(), h.cols())
        })?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.phases) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// `φ` for every row of `h`.
    pub fn apply_batch(&self, h: &Matrix) -> Result<Matrix> {
        let mut z = self.pre_activations(h)?;
        let a = self.amplitude();
        z.as_mut_slice().iter_mut().for_each(|v| *v = a * v.cos());
        Ok(z)
    }

    /// Back-propagates `dL/dφ` (rows) through the map given cached pre-activations.
    pub fn backward(&self, z: &Matrix, grad_phi: &Matrix) -> Matrix {
        let a = self.amplitude();
        let mut gz = grad_phi.clone();
        for (g, zv) in gz.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *g *= -a * zv.sin();
        }
        gz.matmul(&self.weights).expect("shapes fixed by construction")
    }
}
