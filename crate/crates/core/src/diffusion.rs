//! Forward coefficients: bounded continuous drift and diffusion matrix.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Drift `b: R^d -> R^d` and diffusion `sigma: R^d -> R^{d x r}`.
///
/// `sigma` is written row-major into a `d * r` slice.
pub trait Diffusion: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn sigma(&self, x: &[f64], out: &mut [f64]);
    /// Declared sup-norm of the drift.
    fn drift_bound(&self) -> f64;
    /// Declared sup of the operator norm of `sigma`.
    fn sigma_bound(&self) -> f64;
    /// Declared lower bound on the spectrum of `sigma sigma^T` (0 if none).
    fn ellipticity(&self) -> f64;

    /// `out = b(x) dt + sigma(x) dw`.
    fn increment(&self, x: &[f64], dt: f64, dw: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let r = self.noise_dim();
        let mut s = vec![0.0; d * r];
        self.drift(x, out);
        self.sigma(x, &mut s);
        for i in 0..d {
            let row = &s[i * r..(i + 1) * r];
            out[i] = out[i] * dt + row.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Builtin coefficient families.
#[derive(Debug, Clone)]
pub enum DiffusionSpec {
    /// `b = 0`, `sigma = scale * I`.
    Brownian { dim: usize, scale: f64 },
    /// `b = drift`, `sigma = scale * I`.
    ConstantDrift { drift: Vec<f64>, scale: f64 },
    /// Coordinatewise piecewise-linear tables, `b_i(x) = B(x_i)`,
    /// `sigma_ii(x) = S(x_i)`, constant beyond the table ends.
    Table(DiffusionTable),
    Custom(Arc<dyn Diffusion>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTable {
    pub dim: usize,
    pub nodes: Vec<f64>,
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiffusionTable {
    pub fn new(dim: usize, nodes: Vec<f64>, drift: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("diffusion dimension must be at least 1"));
        }
        if nodes.is_empty() || nodes.len() != drift.len() || nodes.len() != sigma.len() {
            return Err(Error::invalid("diffusion table columns must be nonempty and of equal length"));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("diffusion table nodes must be strictly increasing"));
        }
        if nodes.iter().chain(&drift).chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::invalid("diffusion table entries must be finite"));
        }
        Ok(Self { dim, nodes, drift, sigma })
    }

    fn interp(&self, values: &[f64], x: f64) -> f64 {
        let n = self.nodes.len();
        if x <= self.nodes[0] {
            return values[0];
        }
        if x >= self.nodes[n - 1] {
            return values[n - 1];
        }
        let j = self.nodes.partition_point(|&v| v <= x) - 1;
        let w = (x - self.nodes[j]) / (self.nodes[j + 1] - self.nodes[j]);
        values[j] * (1.0 - w) + values[j + 1] * w
    }
}

impl DiffusionSpec {
    pub fn brownian(dim: usize, scale: f64) -> Self {
        Self::Brownian { dim, scale }
    }

    /// Constant coefficients with no noise: deterministic translation.
    pub fn frozen(dim: usize) -> Self {
        Self::Brownian { dim, scale: 0.0 }
    }

    /// Statistical check of the declared bounds on sample points.
    pub fn check_bounds(&self, points: &[Vec<f64>]) -> Result<()> {
        check_bounds(self, points)
    }
}

impl Diffusion for DiffusionSpec {
    fn dim(&self) -> usize {
        match self {
            Self::Brownian { dim, .. } => *dim,
            Self::ConstantDrift { drift, .. } => drift.len(),
            Self::Table(t) => t.dim,
            Self::Custom(c) => c.dim(),
        }
    }

    fn noise_dim(&self) -> usize {
        match self {
            Self::Custom(c) => c.noise_dim(),
            _ => self.dim(),
        }
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Brownian { .. } => out.fill(0.0),
            Self::ConstantDrift { drift, .. } => out.copy_from_slice(drift),
            Self::Table(t) => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = t.interp(&t.drift, *xi);
                }
            }
            Self::Custom(c) => c.drift(x, out),
        }
    }

    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        match self {
            Self::Brownian { scale, .. } | Self::ConstantDrift { scale, .. } => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = *scale;
                }
            }
            Self::Table(t) => {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = t.interp(&t.sigma, x[i]);
                }
            }
            Self::Custom(c) => c.sigma(x, out),
        }
    }

    fn drift_bound(&self) -> f64 {
        match self {
            Self::Brownian { .. } => 0.0,
            Self::ConstantDrift { drift, .. } => drift.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Self::Table(t) => {
                let m = t.drift.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                m * (t.dim as f64).sqrt()
            }
            Self::Custom(c) => c.drift_bound(),
        }
    }

    fn sigma_bound(&self) -> f64 {
        match self {
            Self::Brownian { scale, .. } | Self::ConstantDrift { scale, .. } => scale.abs(),
            Self::Table(t) => t.sigma.iter().fold(0.0f64, |a, v| a.max(v.abs())),
            Self::Custom(c) => c.sigma_bound(),
        }
    }

    fn ellipticity(&self) -> f64 {
        match self {
            Self::Brownian { scale, .. } | Self::ConstantDrift { scale, .. } => scale * scale,
            Self::Table(t) => {
                let m = t.sigma.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
                m * m
            }
            Self::Custom(c) => c.ellipticity(),
        }
    }

    fn increment(&self, x: &[f64], dt: f64, dw: &[f64], out: &mut [f64]) {
        match self {
            Self::Brownian { scale, .. } => {
                for (o, w) in out.iter_mut().zip(dw) {
                    *o = scale * w;
                }
            }
            Self::ConstantDrift { drift, scale } => {
                for ((o, w), b) in out.iter_mut().zip(dw).zip(drift) {
                    *o = b * dt + scale * w;
                }
            }
            Self::Table(t) => {
                for ((o, w), xi) in out.iter_mut().zip(dw).zip(x) {
                    *o = t.interp(&t.drift, *xi) * dt + t.interp(&t.sigma, *xi) * w;
                }
            }
            Self::Custom(c) => c.increment(x, dt, dw, out),
        }
    }
}

/// Checks `|b| <= M_b`, `|sigma| <= M_sigma` and, when the declared
/// ellipticity is positive, `lambda_min(sigma sigma^T) >= alpha0` on the
/// given points.
pub fn check_bounds(spec: &dyn Diffusion, points: &[Vec<f64>]) -> Result<()> {
    let d = spec.dim();
    let r = spec.noise_dim();
    let mut b = vec![0.0; d];
    let mut s = vec![0.0; d * r];
    for x in points {
        spec.drift(x, &mut b);
        spec.sigma(x, &mut s);
        let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if b_norm > spec.drift_bound() + 1e-9 {
            return Err(Error::invalid(format!(
                "drift norm {b_norm} at {x:?} exceeds declared bound {}",
                spec.drift_bound()
            )));
        }
        let sig = DMatrix::from_row_slice(d, r, &s);
        let gram = &sig * sig.transpose();
        let eig = gram.symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(0.0f64, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if max.sqrt() > spec.sigma_bound() + 1e-9 {
            return Err(Error::invalid(format!(
                "diffusion operator norm {} at {x:?} exceeds declared bound {}",
                max.sqrt(),
                spec.sigma_bound()
            )));
        }
        if spec.ellipticity() > 0.0 && min < spec.ellipticity() - 1e-9 {
            return Err(Error::invalid(format!(
                "sigma sigma^T has eigenvalue {min} at {x:?}, below ellipticity {}",
                spec.ellipticity()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_interpolates_and_clamps() {
        let t = DiffusionTable::new(1, vec![-1.0, 1.0], vec![0.0, 2.0], vec![1.0, 3.0]).unwrap();
        let spec = DiffusionSpec::Table(t);
        let mut b = [0.0];
        spec.drift(&[0.0], &mut b);
        assert_eq!(b, [1.0]);
        spec.drift(&[5.0], &mut b);
        assert_eq!(b, [2.0]);
        let mut s = [0.0];
        spec.sigma(&[-7.0], &mut s);
        assert_eq!(s, [1.0]);
        assert_eq!(spec.ellipticity(), 1.0);
    }

    #[test]
    fn default_increment_matches_builtin_fast_path() {
        #[derive(Debug)]
        struct Wrapped(DiffusionSpec);
        impl Diffusion for Wrapped {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn noise_dim(&self) -> usize {
                self.0.noise_dim()
            }
            fn drift(&self, x: &[f64], out: &mut [f64]) {
                self.0.drift(x, out)
            }
            fn sigma(&self, x: &[f64], out: &mut [f64]) {
                self.0.sigma(x, out)
            }
            fn drift_bound(&self) -> f64 {
                self.0.drift_bound()
            }
            fn sigma_bound(&self) -> f64 {
                self.0.sigma_bound()
            }
            fn ellipticity(&self) -> f64 {
                self.0.ellipticity()
            }
        }
        let spec = DiffusionSpec::ConstantDrift {
            drift: vec![0.5, -1.0],
            scale: 2.0,
        };
        let wrapped = Wrapped(spec.clone());
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        spec.increment(&[0.1, 0.2], 0.01, &[0.3, -0.4], &mut a);
        wrapped.increment(&[0.1, 0.2], 0.01, &[0.3, -0.4], &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn bounds_are_checked_on_samples() {
        let pts: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1 - 2.5, 0.3]).collect();
        DiffusionSpec::brownian(2, 1.0).check_bounds(&pts).unwrap();
        DiffusionSpec::ConstantDrift {
            drift: vec![3.0, 4.0],
            scale: 0.5,
        }
        .check_bounds(&pts)
        .unwrap();

        #[derive(Debug)]
        struct Lying;
        impl Diffusion for Lying {
            fn dim(&self) -> usize {
                1
            }
            fn noise_dim(&self) -> usize {
                1
            }
            fn drift(&self, x: &[f64], out: &mut [f64]) {
                out[0] = x[0];
            }
            fn sigma(&self, _x: &[f64], out: &mut [f64]) {
                out[0] = 1.0;
            }
            fn drift_bound(&self) -> f64 {
                1.0
            }
            fn sigma_bound(&self) -> f64 {
                1.0
            }
            fn ellipticity(&self) -> f64 {
                1.0
            }
        }
        let pts: Vec<Vec<f64>> = vec![vec![0.5], vec![2.0]];
        assert!(check_bounds(&Lying, &pts).is_err());
    }
}
