//! Backward solver for the generalized BSDE
//! `Y_s = g(X_T) + int_s^T f(r, X, Y) dr - int_s^T U dM - int_s^T h(r, X, Y) dk`
//! along a simulated forward ensemble.
//!
//! With `C_i = E[Y_{i+1} | X_i]` estimated by least squares on a basis of
//! `X_i`, each backward step sets
//! `Y_i = C_i + f(t_i, X_i, Y~) dt - h(t_i, X_i, Y~) dk_i`, where
//! `Y~ = C_i` (explicit) or the Picard fixed point of that relation, and
//! records the martingale residual `dM_i = Y_{i+1} - C_i`.
//!
//! The drivers do not depend on the martingale integrand, so no separate
//! regression for it is needed.

use rayon::prelude::*;

use crate::diffusion::Diffusion;
use crate::error::{Error, Result};
use crate::forward::{EnsembleSetup, PathEnsemble, PathState, Scheme, Stepper, TimeGrid};
use crate::geometry::ConvexDomain;
use crate::problem::NeumannProblem;
use crate::regression::{orthogonality_residual, Basis, BasisSpec, Projector};

/// Picard residual below which growth is not treated as divergence.
const PICARD_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stepping {
    #[default]
    Explicit,
    Picard(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BsdeOptions {
    pub basis: BasisSpec,
    pub stepping: Stepping,
}

/// Node-by-node access to the forward states in backward order.
pub trait StateSource {
    fn grid(&self) -> TimeGrid;
    fn paths(&self) -> usize;
    fn dim(&self) -> usize;
    /// Writes `X_{t_i}` for every path (path-major, `dim` per path) and,
    /// for `i < N`, the boundary-measure increments `k_{i+1} - k_i`.
    fn load(&mut self, i: usize, x: &mut [f64], dk: &mut [f64]);
}

/// Reads states straight from a stored ensemble.
pub struct StoredStates<'a> {
    ensemble: &'a PathEnsemble,
}

impl<'a> StoredStates<'a> {
    pub fn new(ensemble: &'a PathEnsemble) -> Self {
        Self { ensemble }
    }
}

impl StateSource for StoredStates<'_> {
    fn grid(&self) -> TimeGrid {
        self.ensemble.grid
    }

    fn paths(&self) -> usize {
        self.ensemble.len()
    }

    fn dim(&self) -> usize {
        self.ensemble.dim()
    }

    fn load(&mut self, i: usize, x: &mut [f64], dk: &mut [f64]) {
        let d = self.dim();
        let steps = self.ensemble.grid.steps();
        for (p, path) in self.ensemble.paths.iter().enumerate() {
            x[p * d..(p + 1) * d].copy_from_slice(path.state(i));
            dk[p] = if i < steps { path.boundary_increment(i) } else { 0.0 };
        }
    }
}

/// Regenerates forward states from checkpoints instead of storing them.
///
/// The forward pass keeps `X` every `block` steps; a backward request for a
/// node outside the cached block re-simulates that block from its
/// checkpoint with the same counter-addressed increments. Memory is
/// `O(paths * (steps / block + block))` and the regenerated states are
/// bit-identical to a stored ensemble.
pub struct CheckpointedStates<'a> {
    setup: EnsembleSetup<'a>,
    block: usize,
    /// `checkpoints[p]` holds `X` at nodes `0, block, 2 block, ...` of path `p`.
    checkpoints: Vec<Vec<f64>>,
    cache_first: usize,
    cache_nodes: usize,
    cache_x: Vec<f64>,
    cache_dk: Vec<f64>,
}

impl<'a> CheckpointedStates<'a> {
    pub fn new(setup: EnsembleSetup<'a>) -> Result<Self> {
        let block = ((setup.grid.steps() as f64).sqrt().ceil() as usize).max(1);
        Self::with_block(setup, block)
    }

    pub fn with_block(setup: EnsembleSetup<'a>, block: usize) -> Result<Self> {
        setup.validate()?;
        let block = block.max(1);
        let steps = setup.grid.steps();
        let source = setup.source();
        let sqrt_dt = setup.grid.dt().sqrt();
        let r = setup.spec.noise_dim();
        let d = setup.domain.dim();
        let checkpoints = (0..setup.paths as u64)
            .into_par_iter()
            .map(|p| {
                let mut stream = source.stream(p, 0);
                let mut st = PathState::new(setup.x0);
                let mut stepper = Stepper::new(setup.domain, setup.spec, setup.scheme, setup.grid.dt());
                let mut dw = vec![0.0; r];
                let mut out = Vec::with_capacity((steps / block + 1) * d);
                out.extend_from_slice(&st.x);
                for i in 1..=steps {
                    stream.next_increment(sqrt_dt, &mut dw);
                    stepper.step(&mut st, &dw);
                    if i % block == 0 {
                        out.extend_from_slice(&st.x);
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            setup,
            block,
            checkpoints,
            cache_first: usize::MAX,
            cache_nodes: 0,
            cache_x: Vec::new(),
            cache_dk: Vec::new(),
        })
    }

    fn fill_block(&mut self, b: usize) {
        let d = self.setup.domain.dim();
        let steps = self.setup.grid.steps();
        let first = b * self.block;
        let last = ((b + 1) * self.block).min(steps);
        let nodes = last - first + 1;
        let source = self.setup.source();
        let sqrt_dt = self.setup.grid.dt().sqrt();
        let r = self.setup.spec.noise_dim();
        let setup = &self.setup;
        let blocks: Vec<(Vec<f64>, Vec<f64>)> = self
            .checkpoints
            .par_iter()
            .enumerate()
            .map(|(p, ck)| {
                let mut stream = source.stream(p as u64, first);
                let mut st = PathState::new(&ck[b * d..(b + 1) * d]);
                let mut stepper = Stepper::new(setup.domain, setup.spec, setup.scheme, setup.grid.dt());
                let mut dw = vec![0.0; r];
                let mut xs = Vec::with_capacity(nodes * d);
                let mut dks = Vec::with_capacity(nodes);
                xs.extend_from_slice(&st.x);
                for _ in first..last {
                    stream.next_increment(sqrt_dt, &mut dw);
                    dks.push(stepper.step(&mut st, &dw));
                    xs.extend_from_slice(&st.x);
                }
                dks.push(0.0);
                (xs, dks)
            })
            .collect();
        let m = self.checkpoints.len();
        self.cache_x.resize(nodes * m * d, 0.0);
        self.cache_dk.resize(nodes * m, 0.0);
        for (p, (xs, dks)) in blocks.iter().enumerate() {
            for j in 0..nodes {
                self.cache_x[(j * m + p) * d..(j * m + p + 1) * d].copy_from_slice(&xs[j * d..(j + 1) * d]);
                self.cache_dk[j * m + p] = dks[j];
            }
        }
        self.cache_first = first;
        self.cache_nodes = nodes;
    }
}

impl StateSource for CheckpointedStates<'_> {
    fn grid(&self) -> TimeGrid {
        self.setup.grid
    }

    fn paths(&self) -> usize {
        self.setup.paths
    }

    fn dim(&self) -> usize {
        self.setup.domain.dim()
    }

    fn load(&mut self, i: usize, x: &mut [f64], dk: &mut [f64]) {
        let steps = self.setup.grid.steps();
        let cached = self.cache_first != usize::MAX
            && i >= self.cache_first
            && i < self.cache_first + self.cache_nodes
            // the last node of a block lacks its outgoing increment
            && (i + 1 < self.cache_first + self.cache_nodes || i == steps);
        if !cached {
            let b = if i == steps && i % self.block == 0 { (i / self.block).saturating_sub(1) } else { i / self.block };
            self.fill_block(b);
        }
        let m = self.setup.paths;
        let d = self.dim();
        let j = i - self.cache_first;
        x.copy_from_slice(&self.cache_x[j * m * d..(j + 1) * m * d]);
        dk.copy_from_slice(&self.cache_dk[j * m..(j + 1) * m]);
        if i == steps {
            dk.fill(0.0);
        }
    }
}

/// Per-step regression diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub basis_size: usize,
    pub rank: usize,
    /// Root mean square of `dM_i` over paths and components.
    pub residual_rms: f64,
    /// `max_j |mean_p phi_j(X_i) dM_i|` over basis functions and components.
    pub orthogonality: f64,
}

/// Backward values along an ensemble.
///
/// `y` and `dm` are stored node-major then path-major then component:
/// `y[(i * paths + p) * k + c]`. They are empty when the solve ran without
/// history.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub paths: usize,
    pub k_dim: usize,
    pub y: Vec<f64>,
    pub dm: Vec<f64>,
    /// `Y_{t_0}` per path, `[p * k + c]`.
    pub initial: Vec<f64>,
    /// `g(X_T) + sum_i (f dt - h dk_i)` per path, equal to
    /// `Y_{t_0} + sum_i dM_i`.
    pub pathwise: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl BsdeSolution {
    pub fn has_history(&self) -> bool {
        !self.y.is_empty()
    }

    pub fn value(&self, i: usize, p: usize) -> &[f64] {
        let k = self.k_dim;
        &self.y[(i * self.paths + p) * k..(i * self.paths + p + 1) * k]
    }

    pub fn residual(&self, i: usize, p: usize) -> &[f64] {
        let k = self.k_dim;
        &self.dm[(i * self.paths + p) * k..(i * self.paths + p + 1) * k]
    }

    /// Mean of `Y_{t_0}` per component.
    pub fn initial_mean(&self) -> Vec<f64> {
        column_stats(&self.initial, self.k_dim).0
    }

    /// Standard error of the initial value from the pathwise values.
    pub fn initial_stderr(&self) -> Vec<f64> {
        column_stats(&self.pathwise, self.k_dim).1
    }
}

/// Mean and standard error per component of a `[p * k + c]` array.
pub(crate) fn column_stats(values: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let m = values.len() / k;
    let mut mean = vec![0.0; k];
    for row in values.chunks(k) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= m as f64;
    }
    let mut var = vec![0.0; k];
    for row in values.chunks(k) {
        for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    let se = var
        .iter()
        .map(|s| if m > 1 { (s / (m as f64 - 1.0) / m as f64).sqrt() } else { 0.0 })
        .collect();
    (mean, se)
}

/// Solves the BSDE along a stored ensemble, keeping the full history.
pub fn solve_bsde(
    ensemble: &PathEnsemble,
    domain: &ConvexDomain,
    problem: &dyn NeumannProblem,
    options: BsdeOptions,
) -> Result<BsdeSolution> {
    if ensemble.is_empty() {
        return Err(Error::invalid("ensemble has no paths"));
    }
    solve_backward(&mut StoredStates::new(ensemble), domain, problem, options, true)
}

/// Backward induction over any state source.
pub fn solve_backward(
    source: &mut dyn StateSource,
    domain: &ConvexDomain,
    problem: &dyn NeumannProblem,
    options: BsdeOptions,
    keep_history: bool,
) -> Result<BsdeSolution> {
    let grid = source.grid();
    let m = source.paths();
    let d = source.dim();
    let k = problem.k_dim();
    let steps = grid.steps();
    let dt = grid.dt();
    let basis = Basis::new(options.basis, d);

    let mut x = vec![0.0; m * d];
    let mut dk = vec![0.0; m];
    source.load(steps, &mut x, &mut dk);

    // y_next[c][p]
    let mut y_next = vec![vec![0.0; m]; k];
    {
        let mut g = vec![0.0; k];
        for p in 0..m {
            problem.terminal(&x[p * d..(p + 1) * d], &mut g);
            for c in 0..k {
                y_next[c][p] = g[c];
            }
        }
    }
    let mut history_y = Vec::new();
    let mut history_dm = Vec::new();
    if keep_history {
        history_y = vec![0.0; (steps + 1) * m * k];
        history_dm = vec![0.0; steps * m * k];
        store_node(&mut history_y, steps, m, k, &y_next);
    }
    let mut cumulative = vec![0.0; m * k];
    let mut diagnostics = Vec::with_capacity(steps);

    for i in (0..steps).rev() {
        source.load(i, &mut x, &mut dk);
        let t = grid.time(i);
        let design = basis.design(domain, &x, d);
        let projector = Projector::fit(design.clone(), i)?;
        let fitted: Vec<Vec<f64>> = y_next.iter().map(|y| projector.project(y)).collect();

        let mut orthogonality = 0.0f64;
        let mut sq = 0.0;
        let residuals: Vec<Vec<f64>> = y_next
            .iter()
            .zip(&fitted)
            .map(|(y, c)| y.iter().zip(c).map(|(a, b)| a - b).collect())
            .collect();
        for r in &residuals {
            orthogonality = orthogonality.max(orthogonality_residual(&design, r));
            sq += r.iter().map(|v| v * v).sum::<f64>();
        }
        diagnostics.push(StepDiagnostics {
            step: i,
            basis_size: projector.basis_size(),
            rank: projector.rank(),
            residual_rms: (sq / (m * k) as f64).sqrt(),
            orthogonality,
        });

        let mut rows = vec![0.0; m * k];
        rows.par_chunks_mut(k).enumerate().try_for_each_init(
            || Scratch::new(k),
            |sc, (p, out)| {
                for (c, col) in sc.cond.iter_mut().zip(&fitted) {
                    *c = col[p];
                }
                backward_value(problem, options.stepping, t, &x[p * d..(p + 1) * d], dt, dk[p], i, sc)?;
                out.copy_from_slice(&sc.y);
                Ok::<(), Error>(())
            },
        )?;
        for (p, row) in rows.chunks(k).enumerate() {
            for c in 0..k {
                cumulative[p * k + c] += residuals[c][p];
                y_next[c][p] = row[c];
            }
        }
        if keep_history {
            store_node(&mut history_y, i, m, k, &y_next);
            store_node(&mut history_dm, i, m, k, &residuals);
        }
    }
    diagnostics.reverse();

    let mut initial = vec![0.0; m * k];
    for p in 0..m {
        for c in 0..k {
            initial[p * k + c] = y_next[c][p];
        }
    }
    let pathwise = initial.iter().zip(&cumulative).map(|(a, b)| a + b).collect();
    Ok(BsdeSolution {
        grid,
        paths: m,
        k_dim: k,
        y: history_y,
        dm: history_dm,
        initial,
        pathwise,
        diagnostics,
    })
}

fn store_node(dst: &mut [f64], i: usize, m: usize, k: usize, cols: &[Vec<f64>]) {
    for p in 0..m {
        for c in 0..k {
            dst[(i * m + p) * k + c] = cols[c][p];
        }
    }
}

struct Scratch {
    cond: Vec<f64>,
    f: Vec<f64>,
    h: Vec<f64>,
    y: Vec<f64>,
    next: Vec<f64>,
}

impl Scratch {
    fn new(k: usize) -> Self {
        Self {
            cond: vec![0.0; k],
            f: vec![0.0; k],
            h: vec![0.0; k],
            y: vec![0.0; k],
            next: vec![0.0; k],
        }
    }
}

/// `y = cond + f(t, x, guess) dt - h(t, x, guess) dk` into `out`.
#[allow(clippy::too_many_arguments)]
fn backward_update(problem: &dyn NeumannProblem, t: f64, x: &[f64], guess: &[f64], cond: &[f64], dt: f64, dk: f64, f: &mut [f64], h: &mut [f64], out: &mut [f64]) {
    problem.driver(t, x, guess, f);
    if dk != 0.0 {
        problem.boundary_driver(t, x, guess, h);
    } else {
        h.fill(0.0);
    }
    for (((o, c), fi), hi) in out.iter_mut().zip(cond).zip(f.iter()).zip(h.iter()) {
        *o = c + fi * dt - hi * dk;
    }
}

/// Backward value from `sc.cond` into `sc.y`.
#[allow(clippy::too_many_arguments)]
fn backward_value(problem: &dyn NeumannProblem, stepping: Stepping, t: f64, x: &[f64], dt: f64, dk: f64, step: usize, sc: &mut Scratch) -> Result<()> {
    let Scratch { cond, f, h, y, next } = sc;
    backward_update(problem, t, x, cond, cond, dt, dk, f, h, y);
    if let Stepping::Picard(iters) = stepping {
        let mut prev_res = f64::INFINITY;
        for _ in 0..iters {
            backward_update(problem, t, x, y, cond, dt, dk, f, h, next);
            let res = next.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(y, next);
            if !res.is_finite() || (res > prev_res && res > PICARD_FLOOR) {
                return Err(Error::ConvergenceFailure { step, residual: res });
            }
            prev_res = res;
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::ConvergenceFailure {
            step,
            residual: f64::INFINITY,
        });
    }
    Ok(())
}

/// Which forward scheme a field value comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldScheme {
    Penalized(f64),
    Reflected,
}

impl FieldScheme {
    pub fn scheme(&self) -> Scheme {
        match self {
            FieldScheme::Penalized(n) => Scheme::penalized(*n),
            FieldScheme::Reflected => Scheme::Reflected,
        }
    }

    /// Numeric `n` or `reflected`.
    pub fn label(&self) -> String {
        match self {
            FieldScheme::Penalized(n) => format!("{n}"),
            FieldScheme::Reflected => "reflected".into(),
        }
    }
}

/// Inputs shared by every field evaluation of a study.
#[derive(Debug, Clone, Copy)]
pub struct FieldSolver<'a> {
    pub spec: &'a dyn Diffusion,
    pub domain: &'a ConvexDomain,
    pub problem: &'a dyn NeumannProblem,
    pub options: BsdeOptions,
    pub horizon: f64,
}

/// Monte Carlo estimate of `u(t, x)` (reflected) or `u^n(t, x)` (penalized).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEstimate {
    pub t: f64,
    pub x: Vec<f64>,
    pub scheme: FieldScheme,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Pathwise values behind the estimate, `[p * k + c]`; empty at `t = T`.
    pub samples: Vec<f64>,
}

impl FieldSolver<'_> {
    /// `u(t, x) = Y_t^{t, x}` from an ensemble started at `(t, x)`.
    pub fn evaluate(&self, t: f64, x: &[f64], scheme: FieldScheme, paths: usize, steps: usize, seed: u64) -> Result<FieldEstimate> {
        let k = self.problem.k_dim();
        if !(t.is_finite() && t >= 0.0 && t <= self.horizon) {
            return Err(Error::invalid(format!("evaluation time {t} outside [0, {}]", self.horizon)));
        }
        if x.len() != self.domain.dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("evaluation point must be finite and match the domain dimension"));
        }
        if scheme == FieldScheme::Reflected && !self.domain.contains(x) {
            return Err(Error::invalid(format!("reflected field needs a point in the closed domain, got {x:?}")));
        }
        if t == self.horizon {
            let mut g = vec![0.0; k];
            self.problem.terminal(x, &mut g);
            return Ok(FieldEstimate {
                t,
                x: x.to_vec(),
                scheme,
                value: g,
                stderr: vec![0.0; k],
                paths,
                steps,
                seed,
                samples: Vec::new(),
            });
        }
        let setup = EnsembleSetup {
            spec: self.spec,
            domain: self.domain,
            scheme: scheme.scheme(),
            grid: TimeGrid::new(t, self.horizon, steps)?,
            x0: x,
            seed,
            paths,
        };
        let mut source = CheckpointedStates::new(setup)?;
        let solution = solve_backward(&mut source, self.domain, self.problem, self.options, false)?;
        Ok(FieldEstimate {
            t,
            x: x.to_vec(),
            scheme,
            value: solution.initial_mean(),
            stderr: solution.initial_stderr(),
            paths,
            steps,
            seed,
            samples: solution.pathwise,
        })
    }
}

/// Orthogonality and martingale diagnostics of a solved BSDE.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    /// Per step, `max_j |mean_p phi_j(X_i) dM_i|`.
    pub orthogonality: Vec<f64>,
    /// Per path and component, `sum_i dM_i`, `[p * k + c]`.
    pub cumulative: Vec<f64>,
    pub cumulative_mean: Vec<f64>,
    pub cumulative_stderr: Vec<f64>,
    /// Steps whose orthogonality residual exceeds the tolerance.
    pub flagged: Vec<usize>,
}

pub fn martingale_residual_report(
    solution: &BsdeSolution,
    ensemble: &PathEnsemble,
    domain: &ConvexDomain,
    basis: BasisSpec,
    tolerance: f64,
) -> Result<MartingaleReport> {
    if !solution.has_history() {
        return Err(Error::invalid("martingale report needs a solution with history"));
    }
    if solution.paths != ensemble.len() || solution.grid != ensemble.grid {
        return Err(Error::invalid("solution and ensemble do not match"));
    }
    let m = solution.paths;
    let k = solution.k_dim;
    let d = ensemble.dim();
    let basis = Basis::new(basis, d);
    let mut source = StoredStates::new(ensemble);
    let mut x = vec![0.0; m * d];
    let mut dk = vec![0.0; m];
    let mut orthogonality = Vec::with_capacity(solution.grid.steps());
    let mut cumulative = vec![0.0; m * k];
    for i in 0..solution.grid.steps() {
        source.load(i, &mut x, &mut dk);
        let design = basis.design(domain, &x, d);
        let mut worst = 0.0f64;
        for c in 0..k {
            let col: Vec<f64> = (0..m).map(|p| solution.residual(i, p)[c]).collect();
            worst = worst.max(orthogonality_residual(&design, &col));
            for (p, v) in col.iter().enumerate() {
                cumulative[p * k + c] += v;
            }
        }
        orthogonality.push(worst);
    }
    let (cumulative_mean, cumulative_stderr) = column_stats(&cumulative, k);
    let flagged = orthogonality
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > tolerance)
        .map(|(i, _)| i)
        .collect();
    Ok(MartingaleReport {
        orthogonality,
        cumulative,
        cumulative_mean,
        cumulative_stderr,
        flagged,
    })
}
