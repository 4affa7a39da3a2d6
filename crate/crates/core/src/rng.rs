//! Counter-addressed Gaussian increments.
//!
//! Every path owns a ChaCha8 stream selected by its index, and every time
//! step consumes a fixed number of 32-bit words from that stream. The
//! increment for `(seed, path, step)` is therefore reachable by seeking,
//! which makes ensembles independent of scheduling and lets the backward
//! solver regenerate forward blocks from checkpoints.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::forward::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrownianSource {
    seed: u64,
    noise_dim: usize,
}

impl BrownianSource {
    pub fn new(seed: u64, noise_dim: usize) -> Self {
        assert!(noise_dim >= 1, "noise dimension must be at least 1");
        Self { seed, noise_dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Box-Muller pairs per step.
    fn pairs(&self) -> usize {
        self.noise_dim.div_ceil(2)
    }

    /// A generator positioned at the increment of `step` on `path`.
    pub fn stream(&self, path: u64, step: usize) -> IncrementStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path);
        // two u64 (four u32 words) per Box-Muller pair
        rng.set_word_pos(step as u128 * self.pairs() as u128 * 4);
        IncrementStream {
            rng,
            noise_dim: self.noise_dim,
        }
    }
}

pub struct IncrementStream {
    rng: ChaCha8Rng,
    noise_dim: usize,
}

impl IncrementStream {
    /// Fills `out` (length = noise dimension) with independent `N(0, dt)`
    /// draws and advances to the next step.
    pub fn next_increment(&mut self, sqrt_dt: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.noise_dim);
        let mut i = 0;
        while i < self.noise_dim {
            let (z0, z1) = self.normal_pair();
            out[i] = z0 * sqrt_dt;
            if i + 1 < self.noise_dim {
                out[i + 1] = z1 * sqrt_dt;
            }
            i += 2;
        }
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((self.rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (radius * c, radius * s)
    }
}

/// Brownian path at the grid nodes, `W[0] = 0`.
pub fn sample_brownian(grid: &TimeGrid, noise_dim: usize, seed: u64, path_index: u64) -> Vec<Vec<f64>> {
    let source = BrownianSource::new(seed, noise_dim);
    let mut stream = source.stream(path_index, 0);
    let sqrt_dt = grid.dt().sqrt();
    let mut w = Vec::with_capacity(grid.steps() + 1);
    let mut current = vec![0.0; noise_dim];
    let mut dw = vec![0.0; noise_dim];
    w.push(current.clone());
    for _ in 0..grid.steps() {
        stream.next_increment(sqrt_dt, &mut dw);
        for (c, d) in current.iter_mut().zip(&dw) {
            *c += d;
        }
        w.push(current.clone());
    }
    w
}
