//! Drivers, boundary drivers and terminal data of the Neumann problem.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Growth and regularity constants declared for a problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    /// Monotonicity of `f` in `y`.
    pub alpha: f64,
    /// Lipschitz constant of `h`.
    pub beta: f64,
    /// `|f| + |h| <= c1 (1 + |y|)`.
    pub c1: f64,
    /// `|g(x)| <= c2 (1 + |x|^q)`.
    pub c2: f64,
    pub q: f64,
}

/// Data `(f, h, g)` of a system of `k` semilinear equations.
pub trait NeumannProblem: Send + Sync + fmt::Debug {
    fn k_dim(&self) -> usize;
    /// Driver `f(t, x, y)`.
    fn driver(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]);
    /// Boundary driver `h(t, x, y)`.
    fn boundary_driver(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]);
    /// Terminal datum `g(x)`.
    fn terminal(&self, x: &[f64], out: &mut [f64]);
    fn constants(&self) -> ProblemConstants;
}

/// Builtin catalog. All builtins are scalar (`k = 1`) and read the first
/// space coordinate where they depend on `x`.
#[derive(Debug, Clone)]
pub enum Problem {
    /// `f = -lambda y`, `h = 0`, `g(x) = cos(m pi (x_1 + 1) / 2)`.
    Eigenfunction { lambda: f64, mode: u32 },
    /// `f = 0`, `h = coefficient * y`, `g = terminal`.
    Robin { coefficient: f64, terminal: f64 },
    /// Constant `f`, `h` and `g`.
    Constant { driver: f64, boundary: f64, terminal: f64 },
    /// `f = f0 + f1 y`, `h = h0 + h1 y`, `g(x) = sum_j g_j x_1^j`.
    Polynomial {
        f: [f64; 2],
        h: [f64; 2],
        g: Vec<f64>,
    },
    Custom(Arc<dyn NeumannProblem>),
}

impl NeumannProblem for Problem {
    fn k_dim(&self) -> usize {
        match self {
            Problem::Custom(p) => p.k_dim(),
            _ => 1,
        }
    }

    fn driver(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            Problem::Eigenfunction { lambda, .. } => out[0] = -lambda * y[0],
            Problem::Robin { .. } => out[0] = 0.0,
            Problem::Constant { driver, .. } => out[0] = *driver,
            Problem::Polynomial { f, .. } => out[0] = f[0] + f[1] * y[0],
            Problem::Custom(p) => p.driver(t, x, y, out),
        }
    }

    fn boundary_driver(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            Problem::Eigenfunction { .. } => out[0] = 0.0,
            Problem::Robin { coefficient, .. } => out[0] = coefficient * y[0],
            Problem::Constant { boundary, .. } => out[0] = *boundary,
            Problem::Polynomial { h, .. } => out[0] = h[0] + h[1] * y[0],
            Problem::Custom(p) => p.boundary_driver(t, x, y, out),
        }
    }

    fn terminal(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Problem::Eigenfunction { mode, .. } => out[0] = eigenfunction(*mode, x[0]),
            Problem::Robin { terminal, .. } => out[0] = *terminal,
            Problem::Constant { terminal, .. } => out[0] = *terminal,
            Problem::Polynomial { g, .. } => out[0] = g.iter().rev().fold(0.0, |acc, c| acc * x[0] + c),
            Problem::Custom(p) => p.terminal(x, out),
        }
    }

    fn constants(&self) -> ProblemConstants {
        match self {
            Problem::Eigenfunction { lambda, .. } => ProblemConstants {
                alpha: -lambda,
                beta: 0.0,
                c1: lambda.abs(),
                c2: 1.0,
                q: 1.0,
            },
            Problem::Robin { coefficient, terminal } => ProblemConstants {
                alpha: 0.0,
                beta: coefficient.abs(),
                c1: coefficient.abs(),
                c2: terminal.abs(),
                q: 1.0,
            },
            Problem::Constant {
                driver,
                boundary,
                terminal,
            } => ProblemConstants {
                alpha: 0.0,
                beta: 0.0,
                c1: driver.abs() + boundary.abs(),
                c2: terminal.abs(),
                q: 1.0,
            },
            Problem::Polynomial { f, h, g } => ProblemConstants {
                alpha: f[1],
                beta: h[1].abs(),
                c1: (f[0].abs() + h[0].abs()).max(f[1].abs() + h[1].abs()),
                c2: g.iter().map(|c| c.abs()).sum(),
                q: (g.len().saturating_sub(1)).max(1) as f64,
            },
            Problem::Custom(p) => p.constants(),
        }
    }
}

/// `cos(m pi (x + 1) / 2)`, the `m`-th Neumann eigenfunction of the
/// Laplacian on `(-1, 1)`.
pub fn eigenfunction(mode: u32, x: f64) -> f64 {
    (mode as f64 * PI * (x + 1.0) / 2.0).cos()
}

/// Samples triples and checks the declared monotonicity, Lipschitz and
/// growth constants. `points` supplies the space samples.
pub fn check_assumptions(problem: &dyn NeumannProblem, points: &[Vec<f64>], horizon: f64, seed: u64) -> Result<()> {
    let c = problem.constants();
    let k = problem.k_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_y = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..k).map(|_| rng.random_range(-5.0..5.0)).collect() };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (mut f1, mut f2, mut h1, mut h2, mut g) = (vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for (i, x) in points.iter().enumerate() {
        let x2 = &points[(i * 7 + 3) % points.len()];
        let t = rng.random_range(0.0..=horizon);
        let t2 = rng.random_range(0.0..=horizon);
        let y = draw_y(&mut rng);
        let y2 = draw_y(&mut rng);
        problem.driver(t, x, &y, &mut f1);
        problem.driver(t, x, &y2, &mut f2);
        let dy: Vec<f64> = y2.iter().zip(&y).map(|(a, b)| a - b).collect();
        let df: Vec<f64> = f2.iter().zip(&f1).map(|(a, b)| a - b).collect();
        let mono: f64 = dy.iter().zip(&df).map(|(a, b)| a * b).sum();
        if mono > c.alpha * norm(&dy).powi(2) + 1e-9 {
            return Err(Error::invalid(format!("driver violates monotonicity constant {} at x = {x:?}", c.alpha)));
        }
        problem.boundary_driver(t, x, &y, &mut h1);
        problem.boundary_driver(t2, x2, &y2, &mut h2);
        let dh: Vec<f64> = h2.iter().zip(&h1).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = x2.iter().zip(x).map(|(a, b)| a - b).collect();
        if norm(&dh) > c.beta * ((t2 - t).abs() + norm(&dx) + norm(&dy)) + 1e-9 {
            return Err(Error::invalid(format!("boundary driver violates Lipschitz constant {}", c.beta)));
        }
        if norm(&f1) + norm(&h1) > c.c1 * (1.0 + norm(&y)) + 1e-9 {
            return Err(Error::invalid(format!("drivers violate linear growth constant {}", c.c1)));
        }
        problem.terminal(x, &mut g);
        if norm(&g) > c.c2 * (1.0 + norm(x).powf(c.q)) + 1e-9 {
            return Err(Error::invalid(format!("terminal datum violates growth constant {}", c.c2)));
        }
    }
    Ok(())
}
