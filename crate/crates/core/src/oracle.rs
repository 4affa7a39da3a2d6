//! Deterministic reference solutions in one space dimension: the
//! eigenfunction solution of the linear problem on `(-1, 1)`, the law of
//! reflected Brownian motion on `(-1, 1)`, and finite-difference solvers for
//! the Neumann problem and its penalized approximation on a truncated line.
//!
//! Both FD solvers march backward from `T` with implicit Euler for the
//! diffusion and advection terms. The driver `f` is explicit with one Picard
//! correction; the boundary driver `h` is linearized around the current
//! iterate, which is exact for affine `h` and keeps large boundary sources
//! stable.

use std::f64::consts::PI;
use std::io::Write;

use crate::diffusion::Diffusion;
use crate::error::{Error, Result};
use crate::geometry::ConvexDomain;
use crate::output::fmt_float;
use crate::problem::NeumannProblem;

const BLOW_UP: f64 = 1e6;
/// Pad-doubling change above which the truncation edge is reported.
const PAD_TOL: f64 = 1e-6;

/// `e^{-(lambda + m^2 pi^2 / 8)(T - t)} cos(m pi (x + 1) / 2)`.
pub fn analytic_linear_solution(lambda: f64, mode: u32, t: f64, x: f64, horizon: f64) -> f64 {
    let m = mode as f64;
    (-(lambda + m * m * PI * PI / 8.0) * (horizon - t)).exp() * (m * PI * (x + 1.0) / 2.0).cos()
}

/// Distribution function at `y` of standard Brownian motion on `[-1, 1]`
/// with normal reflection, started at `x0` and run for time `t > 0`.
pub fn reflected_bm_cdf(x0: f64, y: f64, t: f64) -> f64 {
    if y <= -1.0 {
        return 0.0;
    }
    if y >= 1.0 {
        return 1.0;
    }
    let mut sum = (y + 1.0) / 2.0;
    for m in 1..100_000u32 {
        let mf = m as f64;
        let decay = (-mf * mf * PI * PI * t / 8.0).exp();
        if decay < 1e-18 {
            break;
        }
        let a = mf * PI / 2.0;
        sum += (a * (x0 + 1.0)).cos() * (a * (y + 1.0)).sin() / a * decay;
    }
    sum.clamp(0.0, 1.0)
}

/// Two-sided Kolmogorov-Smirnov distance between a sample and a continuous
/// distribution function.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let m = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / m).max((i + 1) as f64 / m - f)
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Uniform space-time grid for the 1-D solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pde1DGrid {
    pub x_lo: f64,
    pub x_hi: f64,
    /// Number of cells; the grid has `cells + 1` nodes.
    pub cells: usize,
    pub steps: usize,
    pub start: f64,
    pub horizon: f64,
}

impl Pde1DGrid {
    pub fn new(x_lo: f64, x_hi: f64, cells: usize, steps: usize, start: f64, horizon: f64) -> Result<Self> {
        if !(x_lo < x_hi) || !x_lo.is_finite() || !x_hi.is_finite() {
            return Err(Error::invalid(format!("empty FD interval [{x_lo}, {x_hi}]")));
        }
        if cells < 2 || steps < 1 {
            return Err(Error::invalid("FD grid needs at least 2 cells and 1 time step"));
        }
        if !(start < horizon) || !start.is_finite() || !horizon.is_finite() {
            return Err(Error::invalid(format!("FD time interval [{start}, {horizon}] is empty")));
        }
        Ok(Self {
            x_lo,
            x_hi,
            cells,
            steps,
            start,
            horizon,
        })
    }

    /// Grid over `[lo - pad, hi + pad]` with `cells` cells inside `[lo, hi]`
    /// and the same spacing in the pads, so `lo` and `hi` are nodes. The pad
    /// is rounded up to a whole number of cells.
    pub fn padded(lo: f64, hi: f64, pad: f64, cells: usize, steps: usize, start: f64, horizon: f64) -> Result<Self> {
        let inner = Self::new(lo, hi, cells, steps, start, horizon)?;
        if !(pad > 0.0) {
            return Err(Error::invalid("penalized FD grid needs a positive pad"));
        }
        let dx = inner.dx();
        let extra = (pad / dx - 1e-9).ceil() as usize;
        Self::new(lo - extra as f64 * dx, hi + extra as f64 * dx, cells + 2 * extra, steps, start, horizon)
    }

    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.cells as f64
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.start) / self.steps as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        if j == self.cells {
            self.x_hi
        } else {
            self.x_lo + j as f64 * self.dx()
        }
    }

    pub fn time(&self, m: usize) -> f64 {
        if m == self.steps {
            self.horizon
        } else {
            self.start + m as f64 * self.dt()
        }
    }

    /// Index of the node closest to `x`.
    pub fn nearest(&self, x: f64) -> usize {
        (((x - self.x_lo) / self.dx()).round().max(0.0) as usize).min(self.cells)
    }

    fn same_spacing(&self, other: &Self) -> bool {
        (self.dx() - other.dx()).abs() <= 1e-12 * self.dx()
    }
}

/// FD solution on every time level.
#[derive(Debug, Clone)]
pub struct FdField {
    pub grid: Pde1DGrid,
    pub k_dim: usize,
    /// `values[(m * nodes + j) * k + c]` at time level `m`, node `j`.
    pub values: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FdField {
    pub fn at(&self, m: usize, j: usize) -> &[f64] {
        let k = self.k_dim;
        let idx = (m * self.grid.nodes() + j) * k;
        &self.values[idx..idx + k]
    }

    /// Linear interpolation in space at time level `m`.
    pub fn interpolate(&self, m: usize, x: f64, component: usize) -> f64 {
        let g = &self.grid;
        let s = ((x - g.x_lo) / g.dx()).clamp(0.0, g.cells as f64);
        let j = (s.floor() as usize).min(g.cells - 1);
        let w = s - j as f64;
        (1.0 - w) * self.at(m, j)[component] + w * self.at(m, j + 1)[component]
    }

    /// Value at the initial time.
    pub fn initial(&self, x: f64, component: usize) -> f64 {
        self.interpolate(0, x, component)
    }

    /// Writes `t,x,component,value` rows for every level and node.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t,x,component,value")?;
        for m in 0..=self.grid.steps {
            let t = fmt_float(self.grid.time(m));
            for j in 0..self.grid.nodes() {
                let x = fmt_float(self.grid.x(j));
                for (c, v) in self.at(m, j).iter().enumerate() {
                    writeln!(w, "{t},{x},{c},{}", fmt_float(*v))?;
                }
            }
        }
        Ok(())
    }
}

/// One-dimensional coefficients `a = sigma^2 / 2` and `b` on the nodes.
fn coefficients(spec: &dyn Diffusion, grid: &Pde1DGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    if spec.dim() != 1 {
        return Err(Error::invalid(format!("FD solvers are one-dimensional, diffusion has dimension {}", spec.dim())));
    }
    let r = spec.noise_dim();
    let mut s = vec![0.0; r];
    let mut b = [0.0];
    let mut a_out = Vec::with_capacity(grid.nodes());
    let mut b_out = Vec::with_capacity(grid.nodes());
    for j in 0..grid.nodes() {
        let x = [grid.x(j)];
        spec.sigma(&x, &mut s);
        spec.drift(&x, &mut b);
        let a = 0.5 * s.iter().map(|v| v * v).sum::<f64>();
        if !a.is_finite() || !b[0].is_finite() {
            return Err(Error::invalid(format!("coefficients are not finite at x = {}", x[0])));
        }
        a_out.push(a);
        b_out.push(b[0]);
    }
    Ok((a_out, b_out))
}

/// Thomas algorithm; `lower[0]` and `upper[n-1]` are ignored.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], work: &mut [f64]) {
    let n = diag.len();
    work[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let denom = diag[i] - lower[i] * work[i - 1];
        work[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= work[i] * rhs[i + 1];
    }
}

/// `h` value and its derivative in `y_c` at `y`, by central differences.
fn boundary_linearization(problem: &dyn NeumannProblem, t: f64, x: f64, y: &[f64], c: usize, out: &mut [f64]) -> (f64, f64) {
    problem.boundary_driver(t, &[x], y, out);
    let h0 = out[c];
    let eps = 1e-6 * (1.0 + y[c].abs());
    let mut yp = y.to_vec();
    yp[c] += eps;
    problem.boundary_driver(t, &[x], &yp, out);
    let hp = out[c];
    yp[c] = y[c] - eps;
    problem.boundary_driver(t, &[x], &yp, out);
    let hm = out[c];
    (h0, (hp - hm) / (2.0 * eps))
}

enum Boundary<'a> {
    /// Ghost nodes carrying `du/dn + h = 0` at both ends.
    Neumann,
    /// Penalized drift and source; truncation edges use `u_xx = 0`.
    Penalized { domain: &'a ConvexDomain, n: f64 },
}

fn march(problem: &dyn NeumannProblem, spec: &dyn Diffusion, grid: &Pde1DGrid, bc: Boundary<'_>) -> Result<FdField> {
    let k = problem.k_dim();
    let nodes = grid.nodes();
    let (a, mut b) = coefficients(spec, grid)?;
    let dx = grid.dx();
    let dt = grid.dt();
    // boundary-measure rate <grad l, n delta> on the nodes
    let mut rate = vec![0.0; nodes];
    if let Boundary::Penalized { domain, n } = bc {
        let mut d = [0.0];
        let mut g = [0.0];
        for j in 0..nodes {
            let x = [grid.x(j)];
            domain.penalization_into(&x, &mut d);
            domain.normal_into(&x, &mut g);
            b[j] -= n * d[0];
            rate[j] = n * d[0] * g[0];
        }
    }
    let penalized = matches!(bc, Boundary::Penalized { .. });

    let mut values = vec![0.0; (grid.steps + 1) * nodes * k];
    let last = grid.steps * nodes * k;
    let mut gbuf = vec![0.0; k];
    for j in 0..nodes {
        problem.terminal(&[grid.x(j)], &mut gbuf);
        values[last + j * k..last + (j + 1) * k].copy_from_slice(&gbuf);
    }

    let mut lower = vec![0.0; nodes];
    let mut diag = vec![0.0; nodes];
    let mut upper = vec![0.0; nodes];
    let mut rhs = vec![0.0; nodes];
    let mut work = vec![0.0; nodes];
    let mut fbuf = vec![0.0; k];
    let mut hbuf = vec![0.0; k];
    let mut guess = vec![0.0; nodes * k];
    let mut next = vec![0.0; nodes * k];

    for m in (0..grid.steps).rev() {
        let t = grid.time(m);
        let prev: Vec<f64> = values[(m + 1) * nodes * k..(m + 2) * nodes * k].to_vec();
        guess.copy_from_slice(&prev);
        for _pass in 0..2 {
            for c in 0..k {
                for j in 0..nodes {
                    let x = grid.x(j);
                    let y = &guess[j * k..(j + 1) * k];
                    problem.driver(t, &[x], y, &mut fbuf);
                    let bp = b[j].max(0.0);
                    let bm = b[j].min(0.0);
                    let mut lo = -dt * (a[j] / (dx * dx) - bm / dx);
                    let mut up = -dt * (a[j] / (dx * dx) + bp / dx);
                    let mut dg = 1.0 - lo - up;
                    let mut r = prev[j * k + c] + dt * fbuf[c];
                    if penalized {
                        if j == 0 || j == nodes - 1 {
                            // u_xx = 0; advect from the inward neighbour
                            let speed = b[j].abs();
                            if j == 0 {
                                lo = 0.0;
                                up = -dt * speed / dx;
                            } else {
                                up = 0.0;
                                lo = -dt * speed / dx;
                            }
                            dg = 1.0 - lo - up;
                        }
                        if rate[j] != 0.0 {
                            let (h0, dh) = boundary_linearization(problem, t, x, y, c, &mut hbuf);
                            dg += dt * rate[j] * dh;
                            r -= dt * rate[j] * (h0 - dh * y[c]);
                        }
                    } else if j == 0 || j == nodes - 1 {
                        let (h0, dh) = boundary_linearization(problem, t, x, y, c, &mut hbuf);
                        let affine = h0 - dh * y[c];
                        if j == 0 {
                            // u_{-1} = u_1 - 2 dx h
                            up += lo;
                            dg -= 2.0 * dx * lo * dh;
                            r += 2.0 * dx * lo * affine;
                            lo = 0.0;
                        } else {
                            // u_{J+1} = u_{J-1} - 2 dx h
                            lo += up;
                            dg -= 2.0 * dx * up * dh;
                            r += 2.0 * dx * up * affine;
                            up = 0.0;
                        }
                    }
                    lower[j] = lo;
                    diag[j] = dg;
                    upper[j] = up;
                    rhs[j] = r;
                }
                solve_tridiagonal(&lower, &diag, &upper, &mut rhs, &mut work);
                for j in 0..nodes {
                    next[j * k + c] = rhs[j];
                }
            }
            guess.copy_from_slice(&next);
        }
        if let Some(v) = guess.iter().find(|v| !v.is_finite() || v.abs() > BLOW_UP) {
            return Err(Error::SchemeFailure(format!(
                "FD solution reached {v} at t = {t}; refine the grid (dx = {dx}, dt = {dt})"
            )));
        }
        values[m * nodes * k..(m + 1) * nodes * k].copy_from_slice(&guess);
    }
    Ok(FdField {
        grid: *grid,
        k_dim: k,
        values,
        warnings: Vec::new(),
    })
}

/// FD solution of the Neumann problem on an interval domain; `grid` must
/// span exactly the closed domain.
pub fn fd_solve_neumann(problem: &dyn NeumannProblem, spec: &dyn Diffusion, domain: &ConvexDomain, grid: &Pde1DGrid) -> Result<FdField> {
    let (lo, hi) = interval_bounds(domain)?;
    if (grid.x_lo - lo).abs() > 1e-12 || (grid.x_hi - hi).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "Neumann FD grid [{}, {}] must coincide with the domain [{lo}, {hi}]",
            grid.x_lo, grid.x_hi
        )));
    }
    march(problem, spec, grid, Boundary::Neumann)
}

/// FD solution of the penalized problem on a grid strictly containing the
/// domain. The solve is repeated with a doubled pad and a warning is
/// recorded when the two differ on the domain.
pub fn fd_solve_penalized(problem: &dyn NeumannProblem, spec: &dyn Diffusion, domain: &ConvexDomain, n: f64, grid: &Pde1DGrid) -> Result<FdField> {
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid(format!("penalization level must be positive, got {n}")));
    }
    let (lo, hi) = interval_bounds(domain)?;
    if !(grid.x_lo < lo && grid.x_hi > hi) {
        return Err(Error::invalid("penalized FD grid must strictly contain the domain"));
    }
    let mut field = march(problem, spec, grid, Boundary::Penalized { domain, n })?;
    let pad = (lo - grid.x_lo).max(grid.x_hi - hi);
    let inner_cells = ((hi - lo) / grid.dx()).round() as usize;
    let wide = Pde1DGrid::padded(lo, hi, 2.0 * pad, inner_cells, grid.steps, grid.start, grid.horizon)?;
    if wide.same_spacing(grid) {
        let check = march(problem, spec, &wide, Boundary::Penalized { domain, n })?;
        let mut worst = 0.0f64;
        for j in grid.nearest(lo)..=grid.nearest(hi) {
            let jw = wide.nearest(grid.x(j));
            for c in 0..field.k_dim {
                worst = worst.max((field.at(0, j)[c] - check.at(0, jw)[c]).abs());
            }
        }
        if worst > PAD_TOL {
            field.warnings.push(format!(
                "truncation edge influences the domain: doubling the pad changes u by {worst:.3e}"
            ));
        }
    }
    Ok(field)
}

/// Default penalized grid: the domain inflated by its width on each side.
pub fn default_penalized_grid(domain: &ConvexDomain, cells: usize, steps: usize, start: f64, horizon: f64) -> Result<Pde1DGrid> {
    let (lo, hi) = interval_bounds(domain)?;
    Pde1DGrid::padded(lo, hi, hi - lo, cells, steps, start, horizon)
}

pub fn interval_bounds(domain: &ConvexDomain) -> Result<(f64, f64)> {
    match domain {
        ConvexDomain::Ball(b) if b.center().len() == 1 => Ok((b.center()[0] - b.radius(), b.center()[0] + b.radius())),
        _ => Err(Error::invalid("FD oracles need a one-dimensional interval domain")),
    }
}

/// `max |u^n(start, x) - u(start, x)|` over the nodes of the domain.
pub fn sup_gap_on_domain(penalized: &FdField, neumann: &FdField) -> f64 {
    let g = &neumann.grid;
    let mut worst = 0.0f64;
    for j in 0..g.nodes() {
        let x = g.x(j);
        let jp = penalized.grid.nearest(x);
        for c in 0..neumann.k_dim {
            worst = worst.max((penalized.at(0, jp)[c] - neumann.at(0, j)[c]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionSpec;
    use crate::problem::Problem;

    fn unit() -> (ConvexDomain, DiffusionSpec) {
        (ConvexDomain::interval(-1.0, 1.0).unwrap(), DiffusionSpec::brownian(1, 1.0))
    }

    #[test]
    fn analytic_examples() {
        assert_eq!(analytic_linear_solution(0.3, 2, 1.0, 0.4, 1.0), (PI * 1.4).cos());
        let v = analytic_linear_solution(0.0, 1, 0.0, -0.5, 1.0);
        assert!((v - (-PI * PI / 8.0).exp() * (PI / 4.0).cos()).abs() < 1e-15);
        assert!((v - 0.2061).abs() < 5e-4);
        let h = 1e-6;
        let slope = (analytic_linear_solution(0.3, 1, 0.2, -1.0 + h, 1.0) - analytic_linear_solution(0.3, 1, 0.2, -1.0, 1.0)) / h;
        assert!(slope.abs() < 1e-5);
    }

    #[test]
    fn reflected_cdf_is_a_distribution() {
        let mut prev = 0.0;
        for i in 0..=200 {
            let y = -1.0 + i as f64 / 100.0;
            let f = reflected_bm_cdf(0.3, y, 0.7);
            assert!(f >= prev - 1e-14);
            prev = f;
        }
        assert!((reflected_bm_cdf(0.3, 1.0, 0.7) - 1.0).abs() < 1e-14);
        // symmetry for a centred start
        for y in [-0.7, -0.2, 0.0, 0.45] {
            let s = reflected_bm_cdf(0.0, y, 1.0) + reflected_bm_cdf(0.0, -y, 1.0);
            assert!((s - 1.0).abs() < 1e-12);
        }
        // long times approach the uniform law
        assert!((reflected_bm_cdf(0.8, 0.0, 40.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reflected_cdf_matches_image_sum_at_short_times() {
        // method of images for small t
        let normal_cdf = |z: f64| 0.5 * erfc(-z / std::f64::consts::SQRT_2);
        let (x0, t) = (0.2f64, 0.05f64);
        let s = t.sqrt();
        for y in [-0.5, 0.0, 0.3, 0.6] {
            let mut f = 0.0;
            for j in -6i32..=6 {
                let shift = 4.0 * j as f64;
                f += normal_cdf((y - x0 - shift) / s) - normal_cdf((-1.0 - x0 - shift) / s);
                let img = -2.0 - x0 + shift;
                f += normal_cdf((y - img) / s) - normal_cdf((-1.0 - img) / s);
            }
            assert!((f - reflected_bm_cdf(x0, y, t)).abs() < 1e-7, "{y}: {f}");
        }
    }

    fn erfc(x: f64) -> f64 {
        // Numerical Recipes erfcc, relative error below 1.2e-7
        let z = x.abs();
        let t = 1.0 / (1.0 + 0.5 * z);
        let r = t * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
        if x >= 0.0 {
            r
        } else {
            2.0 - r
        }
    }

    #[test]
    fn ks_of_exact_quantiles_is_small() {
        let m = 1000;
        let xs: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect();
        let d = ks_distance(&xs, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.5 / m as f64).abs() < 1e-12);
        assert_eq!(ks_two_sample(&xs, &xs), 0.0);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.1).collect();
        assert!((ks_two_sample(&xs, &shifted) - 0.1).abs() < 2e-3);
    }

    #[test]
    fn constant_data_stays_constant() {
        let (dom, spec) = unit();
        let p = Problem::Constant {
            driver: 0.0,
            boundary: 0.0,
            terminal: 0.7,
        };
        let grid = Pde1DGrid::new(-1.0, 1.0, 50, 20, 0.0, 1.0).unwrap();
        let u = fd_solve_neumann(&p, &spec, &dom, &grid).unwrap();
        assert!(u.values.iter().all(|v| (v - 0.7).abs() < 1e-12));
        let wide = default_penalized_grid(&dom, 50, 20, 0.0, 1.0).unwrap();
        let un = fd_solve_penalized(&p, &spec, &dom, 16.0, &wide).unwrap();
        assert!(un.values.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn eigenfunction_matches_closed_form() {
        let (dom, spec) = unit();
        let p = Problem::Eigenfunction { lambda: 0.3, mode: 1 };
        let grid = Pde1DGrid::new(-1.0, 1.0, 400, 400, 0.0, 1.0).unwrap();
        let u = fd_solve_neumann(&p, &spec, &dom, &grid).unwrap();
        let mut worst = 0.0f64;
        for j in 0..grid.nodes() {
            worst = worst.max((u.at(0, j)[0] - analytic_linear_solution(0.3, 1, 0.0, grid.x(j), 1.0)).abs());
        }
        assert!(worst < 1e-3, "{worst}");
        let v = analytic_linear_solution(0.0, 1, 0.0, -0.5, 1.0);
        let p0 = Problem::Eigenfunction { lambda: 0.0, mode: 1 };
        let u0 = fd_solve_neumann(&p0, &spec, &dom, &grid).unwrap();
        assert!((u0.initial(-0.5, 0) - v).abs() < 1e-3);
    }

    #[test]
    fn self_convergence_under_refinement() {
        let (dom, spec) = unit();
        let p = Problem::Robin {
            coefficient: 1.0,
            terminal: 1.0,
        };
        let coarse = fd_solve_neumann(&p, &spec, &dom, &Pde1DGrid::new(-1.0, 1.0, 100, 100, 0.0, 1.0).unwrap()).unwrap();
        let mid = fd_solve_neumann(&p, &spec, &dom, &Pde1DGrid::new(-1.0, 1.0, 200, 200, 0.0, 1.0).unwrap()).unwrap();
        let fine = fd_solve_neumann(&p, &spec, &dom, &Pde1DGrid::new(-1.0, 1.0, 400, 400, 0.0, 1.0).unwrap()).unwrap();
        let gap = |a: &FdField, b: &FdField| {
            [-1.0, -0.5, 0.0, 0.5, 1.0]
                .iter()
                .map(|&x| (a.initial(x, 0) - b.initial(x, 0)).abs())
                .fold(0.0, f64::max)
        };
        let (g1, g2) = (gap(&coarse, &mid), gap(&mid, &fine));
        assert!(g2 < g1 && g2 < 4e-3, "{g1} {g2}");
        // first order: gaps roughly halve
        assert!(g1 / g2 > 1.5 && g1 / g2 < 2.6, "{}", g1 / g2);
    }

    #[test]
    fn robin_is_symmetric_and_below_one() {
        let (dom, spec) = unit();
        let p = Problem::Robin {
            coefficient: 1.0,
            terminal: 1.0,
        };
        let grid = Pde1DGrid::new(-1.0, 1.0, 200, 200, 0.0, 1.0).unwrap();
        let u = fd_solve_neumann(&p, &spec, &dom, &grid).unwrap();
        for m in 0..grid.steps {
            for j in 0..grid.nodes() {
                let v = u.at(m, j)[0];
                assert!(v < 1.0);
                assert!((v - u.at(m, grid.cells - j)[0]).abs() < 1e-12);
            }
        }
        // boundary relation du/dn = -u through the one-sided slope
        let (ub, ui) = (u.at(0, grid.cells)[0], u.at(0, grid.cells - 1)[0]);
        assert!(((ub - ui) / grid.dx() + ub).abs() < 0.02);
    }

    #[test]
    fn maximum_principle() {
        let (dom, spec) = unit();
        let p = Problem::Polynomial {
            f: [0.0, 0.0],
            h: [0.0, 0.0],
            g: vec![0.5, 0.0, 0.0, 0.5],
        };
        let grid = Pde1DGrid::new(-1.0, 1.0, 80, 80, 0.0, 1.0).unwrap();
        let u = fd_solve_neumann(&p, &spec, &dom, &grid).unwrap();
        assert!(u.values.iter().all(|v| (-1e-10..=1.0 + 1e-10).contains(v)));
        let wide = default_penalized_grid(&dom, 80, 80, 0.0, 1.0).unwrap();
        let un = fd_solve_penalized(&p, &spec, &dom, 64.0, &wide).unwrap();
        // on the whole line g leaves [0, 1]; the bounds are those of g on the grid
        let mut g = [0.0];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for j in 0..wide.nodes() {
            p.terminal(&[wide.x(j)], &mut g);
            lo = lo.min(g[0]);
            hi = hi.max(g[0]);
        }
        assert!(un.values.iter().all(|v| (lo - 1e-10..=hi + 1e-10).contains(v)));
    }

    #[test]
    fn penalization_vanishes_inside() {
        // with no boundary driver and data far from the boundary, both
        // solvers see the same heat equation on the inside until the
        // boundary is felt
        let (dom, spec) = unit();
        let p = Problem::Eigenfunction { lambda: 0.0, mode: 2 };
        let grid = Pde1DGrid::new(-1.0, 1.0, 100, 5, 0.99, 1.0).unwrap();
        let wide = default_penalized_grid(&dom, 100, 5, 0.99, 1.0).unwrap();
        let u = fd_solve_neumann(&p, &spec, &dom, &grid).unwrap();
        let un = fd_solve_penalized(&p, &spec, &dom, 1e3, &wide).unwrap();
        let gap = (un.initial(0.0, 0) - u.initial(0.0, 0)).abs();
        assert!(gap < 1e-10, "{gap}");
    }

    #[test]
    fn penalized_converges_to_neumann() {
        let (dom, spec) = unit();
        let p = Problem::Robin {
            coefficient: 1.0,
            terminal: 1.0,
        };
        let grid = Pde1DGrid::new(-1.0, 1.0, 200, 200, 0.0, 1.0).unwrap();
        let u = fd_solve_neumann(&p, &spec, &dom, &grid).unwrap();
        let wide = default_penalized_grid(&dom, 200, 200, 0.0, 1.0).unwrap();
        let mut last = f64::INFINITY;
        for n in [4.0, 16.0, 64.0, 256.0] {
            let un = fd_solve_penalized(&p, &spec, &dom, n, &wide).unwrap();
            assert!(un.warnings.is_empty(), "{:?}", un.warnings);
            let gap = sup_gap_on_domain(&un, &u);
            assert!(gap < last, "n = {n}: {gap} >= {last}");
            last = gap;
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let (dom, spec) = unit();
        let p = Problem::Polynomial {
            f: [0.0, 40.0],
            h: [0.0, 0.0],
            g: vec![1.0],
        };
        let grid = Pde1DGrid::new(-1.0, 1.0, 20, 10, 0.0, 1.0).unwrap();
        assert!(matches!(fd_solve_neumann(&p, &spec, &dom, &grid), Err(Error::SchemeFailure(_))));
    }

    #[test]
    fn grid_validation_and_csv() {
        let (dom, spec) = unit();
        assert!(Pde1DGrid::new(1.0, -1.0, 10, 10, 0.0, 1.0).is_err());
        let wide = default_penalized_grid(&dom, 10, 2, 0.0, 1.0).unwrap();
        assert_eq!(wide.cells, 30);
        assert_eq!(wide.x(10), -1.0);
        assert!((wide.x(20) - 1.0).abs() < 1e-15);
        let p = Problem::Eigenfunction { lambda: 0.0, mode: 1 };
        assert!(fd_solve_neumann(&p, &spec, &dom, &wide).is_err());
        let grid = Pde1DGrid::new(-1.0, 1.0, 4, 1, 0.0, 1.0).unwrap();
        assert!(fd_solve_penalized(&p, &spec, &dom, 4.0, &grid).is_err());
        let u = fd_solve_neumann(&p, &spec, &dom, &grid).unwrap();
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 5);
        assert!(text.starts_with("t,x,component,value\n"));
    }
}
