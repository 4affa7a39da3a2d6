//! Forward simulation of the penalized and reflected SDEs.
//!
//! Both schemes advance the free term `V = x + int b dr + int sigma dW` by
//! an Euler step and then correct the state:
//!
//! - reflected: `X_{i+1} = proj(X_i + b dt + sigma dW)`;
//! - penalized (semi-implicit): `X_{i+1}` solves
//!   `X_{i+1} + n dt delta(X_{i+1}) = X_i + b dt + sigma dW`, i.e. the
//!   resolvent of `delta` with parameter `n dt`;
//! - penalized (explicit): `X_{i+1} = X_i + b dt + sigma dW - n delta(X_i) dt`.
//!
//! The reflection process is stored as `K = V - X`, so the decomposition
//! `X + K = V` holds to rounding at every node. The boundary measure is
//! accumulated as `dk = <grad l(X~), dK>`, where `X~` is the point at which
//! the correction was evaluated (`X_{i+1}` for the projection and the
//! resolvent, `X_i` for the explicit step).
//!
//! Paths live on `[t, T]` only; consumers that need the convention
//! `X_s = x, K_s = 0` for `s < t` apply it themselves.

use rayon::prelude::*;

use crate::diffusion::Diffusion;
use crate::error::{Error, Result};
use crate::geometry::{dot, euclid, norm, ConvexDomain};
use crate::rng::BrownianSource;

/// Uniform grid `t = t_0 < ... < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    start: f64,
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(start: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(start.is_finite() && horizon.is_finite()) || start < 0.0 {
            return Err(Error::invalid(format!("time grid needs finite 0 <= t, got t = {start}")));
        }
        if !(horizon > start) {
            return Err(Error::invalid(format!("time grid needs T > t, got t = {start}, T = {horizon}")));
        }
        if steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        Ok(Self { start, horizon, steps })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.start) / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            self.start + i as f64 * self.dt()
        }
    }
}

/// How the penalty term is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltyStepping {
    #[default]
    SemiImplicit,
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Penalized { n: f64, stepping: PenaltyStepping },
    Reflected,
}

impl Scheme {
    pub fn penalized(n: f64) -> Self {
        Scheme::Penalized {
            n,
            stepping: PenaltyStepping::SemiImplicit,
        }
    }

    /// `penalized(n)` or `reflected`.
    pub fn label(&self) -> String {
        match self {
            Scheme::Penalized { n, .. } => format!("penalized({n})"),
            Scheme::Reflected => "reflected".to_string(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Scheme::Penalized { n, .. } = self {
            if !(n.is_finite() && *n > 0.0) {
                return Err(Error::invalid(format!("penalization level must be positive, got {n}")));
            }
        }
        Ok(())
    }
}

/// State carried by one path between steps.
#[derive(Debug, Clone)]
pub(crate) struct PathState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub refl: Vec<f64>,
    pub k: f64,
    pub tv: f64,
}

impl PathState {
    pub fn new(x0: &[f64]) -> Self {
        Self {
            x: x0.to_vec(),
            v: x0.to_vec(),
            refl: vec![0.0; x0.len()],
            k: 0.0,
            tv: 0.0,
        }
    }
}

/// One-step integrator shared by every simulation routine.
pub(crate) struct Stepper<'a> {
    domain: &'a ConvexDomain,
    spec: &'a dyn Diffusion,
    scheme: Scheme,
    dt: f64,
    inc: Vec<f64>,
    pre: Vec<f64>,
    scratch: Vec<f64>,
    normal: Vec<f64>,
    eval: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(domain: &'a ConvexDomain, spec: &'a dyn Diffusion, scheme: Scheme, dt: f64) -> Self {
        let d = domain.dim();
        Self {
            domain,
            spec,
            scheme,
            dt,
            inc: vec![0.0; d],
            pre: vec![0.0; d],
            scratch: vec![0.0; d],
            normal: vec![0.0; d],
            eval: vec![0.0; d],
        }
    }

    /// Advances `st` by one step driven by `dw`; returns the boundary
    /// measure increment.
    pub fn step(&mut self, st: &mut PathState, dw: &[f64]) -> f64 {
        self.spec.increment(&st.x, self.dt, dw, &mut self.inc);
        self.drive(st)
    }

    /// Advances `st` by a prescribed free-term increment.
    pub fn step_free(&mut self, st: &mut PathState, dv: &[f64]) -> f64 {
        self.inc.copy_from_slice(dv);
        self.drive(st)
    }

    fn drive(&mut self, st: &mut PathState) -> f64 {
        self.eval.copy_from_slice(&st.x);
        for ((p, x), (v, i)) in self.pre.iter_mut().zip(&st.x).zip(st.v.iter_mut().zip(&self.inc)) {
            *p = x + i;
            *v += i;
        }
        let dk = match self.scheme {
            Scheme::Reflected => {
                if self.domain.contains(&self.pre) {
                    st.x.copy_from_slice(&self.pre);
                    0.0
                } else {
                    self.domain.project_into(&self.pre, &mut st.x);
                    self.eval.copy_from_slice(&st.x);
                    self.correction_measure(st)
                }
            }
            Scheme::Penalized {
                n,
                stepping: PenaltyStepping::SemiImplicit,
            } => {
                st.x.copy_from_slice(&self.pre);
                if self.domain.contains(&self.pre) {
                    0.0
                } else {
                    self.domain.resolvent_in_place(&mut st.x, n * self.dt, &mut self.scratch);
                    self.eval.copy_from_slice(&st.x);
                    self.correction_measure(st)
                }
            }
            Scheme::Penalized {
                n,
                stepping: PenaltyStepping::Explicit,
            } => {
                if self.domain.contains(&st.x) {
                    st.x.copy_from_slice(&self.pre);
                    0.0
                } else {
                    // eval holds X_i
                    self.domain.penalization_into(&self.eval, &mut self.scratch);
                    for ((x, p), dl) in st.x.iter_mut().zip(&self.pre).zip(&self.scratch) {
                        *x = p - n * dl * self.dt;
                    }
                    self.correction_measure(st)
                }
            }
        };
        for ((r, v), x) in st.refl.iter_mut().zip(&st.v).zip(&st.x) {
            *r = v - x;
        }
        st.k += dk;
        dk
    }

    /// `dK = pre - X_{i+1}`; accumulates `|dK|` and returns `<grad l(eval), dK>`.
    fn correction_measure(&mut self, st: &mut PathState) -> f64 {
        for ((s, p), x) in self.scratch.iter_mut().zip(&self.pre).zip(&st.x) {
            *s = p - x;
        }
        st.tv += norm(&self.scratch);
        self.domain.normal_into(&self.eval, &mut self.normal);
        dot(&self.normal, &self.scratch)
    }
}

/// A discretized forward path with its reflection data.
///
/// Node arrays are flattened node-major: `x[i * d .. (i + 1) * d]` is `X_{t_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPath {
    pub scheme: Scheme,
    pub grid: TimeGrid,
    pub dim: usize,
    pub noise_dim: usize,
    pub x: Vec<f64>,
    /// Reflection process `K`.
    pub refl: Vec<f64>,
    /// Boundary measure `k`.
    pub k: Vec<f64>,
    pub w: Vec<f64>,
    /// Free term `V = X + K`.
    pub v: Vec<f64>,
    /// Total variation of `K`, `sum |K_{i+1} - K_i|`.
    pub variation: f64,
}

impl ForwardPath {
    pub fn nodes(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn reflection(&self, i: usize) -> &[f64] {
        &self.refl[i * self.dim..(i + 1) * self.dim]
    }

    pub fn free_term(&self, i: usize) -> &[f64] {
        &self.v[i * self.dim..(i + 1) * self.dim]
    }

    pub fn brownian(&self, i: usize) -> &[f64] {
        &self.w[i * self.noise_dim..(i + 1) * self.noise_dim]
    }

    pub fn boundary_increment(&self, i: usize) -> f64 {
        self.k[i + 1] - self.k[i]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.steps())
    }

    pub fn sup_state_norm(&self) -> f64 {
        (0..self.nodes()).map(|i| norm(self.state(i))).fold(0.0, f64::max)
    }

    pub fn sup_reflection_norm(&self) -> f64 {
        (0..self.nodes()).map(|i| norm(self.reflection(i))).fold(0.0, f64::max)
    }
}

fn check_start(domain: &ConvexDomain, spec: &dyn Diffusion, x0: &[f64], must_be_inside: bool) -> Result<()> {
    if x0.len() != domain.dim() || spec.dim() != domain.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: start point {}, domain {}, diffusion {}",
            x0.len(),
            domain.dim(),
            spec.dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("start point must be finite"));
    }
    if must_be_inside && !domain.contains(x0) {
        return Err(Error::invalid(format!("start point {x0:?} lies outside the closed domain")));
    }
    Ok(())
}

fn run_path(
    spec: &dyn Diffusion,
    domain: &ConvexDomain,
    scheme: Scheme,
    grid: &TimeGrid,
    x0: &[f64],
    increments: impl Fn(usize, &mut [f64]),
) -> ForwardPath {
    let d = domain.dim();
    let r = spec.noise_dim();
    let nodes = grid.steps() + 1;
    let mut path = ForwardPath {
        scheme,
        grid: *grid,
        dim: d,
        noise_dim: r,
        x: Vec::with_capacity(nodes * d),
        refl: Vec::with_capacity(nodes * d),
        k: Vec::with_capacity(nodes),
        w: Vec::with_capacity(nodes * r),
        v: Vec::with_capacity(nodes * d),
        variation: 0.0,
    };
    let mut st = PathState::new(x0);
    let mut stepper = Stepper::new(domain, spec, scheme, grid.dt());
    let mut w = vec![0.0; r];
    let mut dw = vec![0.0; r];
    let push = |path: &mut ForwardPath, st: &PathState, w: &[f64]| {
        path.x.extend_from_slice(&st.x);
        path.refl.extend_from_slice(&st.refl);
        path.k.push(st.k);
        path.w.extend_from_slice(w);
        path.v.extend_from_slice(&st.v);
    };
    push(&mut path, &st, &w);
    for i in 0..grid.steps() {
        increments(i, &mut dw);
        for (wi, di) in w.iter_mut().zip(&dw) {
            *wi += di;
        }
        stepper.step(&mut st, &dw);
        push(&mut path, &st, &w);
    }
    path.variation = st.tv;
    path
}

fn brownian_increments<'a>(w: &'a [Vec<f64>], grid: &TimeGrid, r: usize) -> Result<impl Fn(usize, &mut [f64]) + 'a> {
    if w.len() != grid.steps() + 1 {
        return Err(Error::invalid(format!(
            "Brownian path has {} nodes, grid has {}",
            w.len(),
            grid.steps() + 1
        )));
    }
    if w.iter().any(|wi| wi.len() != r) {
        return Err(Error::invalid(format!("Brownian path must have {r} components per node")));
    }
    Ok(move |i: usize, out: &mut [f64]| {
        for (o, (a, b)) in out.iter_mut().zip(w[i + 1].iter().zip(&w[i])) {
            *o = a - b;
        }
    })
}

/// Penalized path driven by a given Brownian path (node values).
pub fn simulate_penalized(
    spec: &dyn Diffusion,
    domain: &ConvexDomain,
    n: f64,
    grid: &TimeGrid,
    x0: &[f64],
    w: &[Vec<f64>],
) -> Result<ForwardPath> {
    simulate_with(spec, domain, Scheme::penalized(n), grid, x0, w)
}

/// Reflected (projection) path driven by a given Brownian path.
pub fn simulate_reflected(
    spec: &dyn Diffusion,
    domain: &ConvexDomain,
    grid: &TimeGrid,
    x0: &[f64],
    w: &[Vec<f64>],
) -> Result<ForwardPath> {
    simulate_with(spec, domain, Scheme::Reflected, grid, x0, w)
}

pub fn simulate_with(
    spec: &dyn Diffusion,
    domain: &ConvexDomain,
    scheme: Scheme,
    grid: &TimeGrid,
    x0: &[f64],
    w: &[Vec<f64>],
) -> Result<ForwardPath> {
    scheme.validate()?;
    check_start(domain, spec, x0, true)?;
    let inc = brownian_increments(w, grid, spec.noise_dim())?;
    Ok(run_path(spec, domain, scheme, grid, x0, inc))
}

/// Everything needed to regenerate a path ensemble.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleSetup<'a> {
    pub spec: &'a dyn Diffusion,
    pub domain: &'a ConvexDomain,
    pub scheme: Scheme,
    pub grid: TimeGrid,
    pub x0: &'a [f64],
    pub seed: u64,
    pub paths: usize,
}

impl<'a> EnsembleSetup<'a> {
    /// Validates the setup. Penalized ensembles may start anywhere; the
    /// reflected scheme needs a start point in the closed domain.
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        check_start(self.domain, self.spec, self.x0, matches!(self.scheme, Scheme::Reflected))?;
        if self.paths == 0 {
            return Err(Error::invalid("ensemble needs at least one path"));
        }
        Ok(())
    }

    pub fn source(&self) -> BrownianSource {
        BrownianSource::new(self.seed, self.spec.noise_dim())
    }

    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        Self { scheme, ..*self }
    }
}

/// Paths sharing one grid, scheme and coefficient set.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub scheme: Scheme,
    pub grid: TimeGrid,
    pub seed: u64,
    pub paths: Vec<ForwardPath>,
}

impl PathEnsemble {
    pub fn simulate(setup: &EnsembleSetup<'_>) -> Result<Self> {
        setup.validate()?;
        let source = setup.source();
        let sqrt_dt = setup.grid.dt().sqrt();
        let paths = (0..setup.paths as u64)
            .into_par_iter()
            .map(|p| {
                let stream = std::cell::RefCell::new(source.stream(p, 0));
                run_path(setup.spec, setup.domain, setup.scheme, &setup.grid, setup.x0, |_, out| {
                    stream.borrow_mut().next_increment(sqrt_dt, out)
                })
            })
            .collect();
        Ok(Self {
            scheme: setup.scheme,
            grid: setup.grid,
            seed: setup.seed,
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.paths.first().map_or(0, |p| p.dim)
    }
}

/// Per-path summaries computed on the fly, without storing nodes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathSummary {
    pub sup_state: f64,
    pub sup_reflection: f64,
    pub variation: f64,
    pub boundary_measure: f64,
}

/// Streams each path and reports sup norms, variation and final boundary
/// measure.
pub fn summarize_paths(setup: &EnsembleSetup<'_>) -> Result<Vec<PathSummary>> {
    for_each_step(setup, PathSummary::default, |acc, st| {
        acc.sup_state = acc.sup_state.max(norm(&st.x));
        acc.sup_reflection = acc.sup_reflection.max(norm(&st.refl));
        acc.variation = st.tv;
        acc.boundary_measure = st.k;
    })
}

/// Terminal states `X_T`, one per path.
pub fn terminal_states(setup: &EnsembleSetup<'_>) -> Result<Vec<Vec<f64>>> {
    for_each_step(setup, Vec::new, |acc, st| {
        acc.clear();
        acc.extend_from_slice(&st.x);
    })
}

/// Terminal state `X_T` and reflection `K_T`, one pair per path.
pub fn terminal_decomposition(setup: &EnsembleSetup<'_>) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    for_each_step(setup, || (Vec::new(), Vec::new()), |acc, st| {
        acc.0.clear();
        acc.0.extend_from_slice(&st.x);
        acc.1.clear();
        acc.1.extend_from_slice(&st.refl);
    })
}

/// Folds `update` over the nodes of every path (node 0 included).
pub(crate) fn for_each_step<T, I, U>(setup: &EnsembleSetup<'_>, init: I, update: U) -> Result<Vec<T>>
where
    T: Send,
    I: Fn() -> T + Sync,
    U: Fn(&mut T, &PathState) + Sync,
{
    setup.validate()?;
    let source = setup.source();
    let sqrt_dt = setup.grid.dt().sqrt();
    let r = setup.spec.noise_dim();
    Ok((0..setup.paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut stream = source.stream(p, 0);
            let mut st = PathState::new(setup.x0);
            let mut stepper = Stepper::new(setup.domain, setup.spec, setup.scheme, setup.grid.dt());
            let mut dw = vec![0.0; r];
            let mut acc = init();
            update(&mut acc, &st);
            for _ in 0..setup.grid.steps() {
                stream.next_increment(sqrt_dt, &mut dw);
                stepper.step(&mut st, &dw);
                update(&mut acc, &st);
            }
            acc
        })
        .collect())
}

/// Sup-distances between a penalized path and the reflected path driven by
/// the same Brownian increments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CouplingSample {
    pub sup_state: Vec<f64>,
    pub sup_reflection: Vec<f64>,
}

/// Couples the penalized scheme with level `n` and the reflected scheme path
/// by path. `setup.scheme` is ignored.
pub fn couple_and_compare(setup: &EnsembleSetup<'_>, n: f64) -> Result<CouplingSample> {
    couple_and_compare_with(setup, n, PenaltyStepping::SemiImplicit)
}

pub fn couple_and_compare_with(setup: &EnsembleSetup<'_>, n: f64, stepping: PenaltyStepping) -> Result<CouplingSample> {
    let penalized = Scheme::Penalized { n, stepping };
    let setup = setup.with_scheme(Scheme::Reflected);
    setup.validate()?;
    penalized.validate()?;
    let source = setup.source();
    let sqrt_dt = setup.grid.dt().sqrt();
    let r = setup.spec.noise_dim();
    let pairs: Vec<(f64, f64)> = (0..setup.paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut stream = source.stream(p, 0);
            let mut pen = PathState::new(setup.x0);
            let mut refl = PathState::new(setup.x0);
            let mut pen_step = Stepper::new(setup.domain, setup.spec, penalized, setup.grid.dt());
            let mut refl_step = Stepper::new(setup.domain, setup.spec, Scheme::Reflected, setup.grid.dt());
            let mut dw = vec![0.0; r];
            let (mut sx, mut sk) = (0.0f64, 0.0f64);
            for _ in 0..setup.grid.steps() {
                stream.next_increment(sqrt_dt, &mut dw);
                pen_step.step(&mut pen, &dw);
                refl_step.step(&mut refl, &dw);
                sx = sx.max(euclid(&pen.x, &refl.x));
                sk = sk.max(euclid(&pen.refl, &refl.refl));
            }
            (sx, sk)
        })
        .collect();
    Ok(CouplingSample {
        sup_state: pairs.iter().map(|p| p.0).collect(),
        sup_reflection: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Penalized integrator driven by a deterministic free term.
///
/// Returns `(X, K)` node arrays (flattened, node-major) solving
/// `X_{i+1} + n dt delta(X_{i+1}) = X_i + (V_{i+1} - V_i)`, `K = V - X`,
/// together with the total variation of `K`.
pub fn penalize_free_term(domain: &ConvexDomain, n: f64, dt: f64, free_term: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    Scheme::penalized(n).validate()?;
    let d = domain.dim();
    let Some(start) = free_term.first() else {
        return Err(Error::invalid("free term needs at least one node"));
    };
    if free_term.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("free term dimension does not match the domain"));
    }
    let frozen = crate::diffusion::DiffusionSpec::frozen(d);
    let mut stepper = Stepper::new(domain, &frozen, Scheme::penalized(n), dt);
    let mut st = PathState::new(start);
    let mut xs = start.clone();
    let mut ks = vec![0.0; d];
    let mut dv = vec![0.0; d];
    for w in free_term.windows(2) {
        for (o, (a, b)) in dv.iter_mut().zip(w[1].iter().zip(&w[0])) {
            *o = a - b;
        }
        stepper.step_free(&mut st, &dv);
        xs.extend_from_slice(&st.x);
        ks.extend_from_slice(&st.refl);
    }
    Ok((xs, ks, st.tv))
}

/// Both sides of the pathwise comparison
/// `sup|X^ - X-|^2 <= sup|D|^2 + 4 sup|D| (|K^|_TV + |K-|_TV)`, `D = V^n - V^`,
/// for two free terms fed to the same penalized integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathwiseBound {
    pub lhs: f64,
    pub rhs: f64,
}

impl PathwiseBound {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

pub fn pathwise_penalized_bound(
    domain: &ConvexDomain,
    n: f64,
    dt: f64,
    free_a: &[Vec<f64>],
    free_b: &[Vec<f64>],
) -> Result<PathwiseBound> {
    if free_a.len() != free_b.len() {
        return Err(Error::invalid("free terms must share the grid"));
    }
    let d = domain.dim();
    let (xa, _, tva) = penalize_free_term(domain, n, dt, free_a)?;
    let (xb, _, tvb) = penalize_free_term(domain, n, dt, free_b)?;
    let mut sup_x = 0.0f64;
    let mut sup_v = 0.0f64;
    for i in 0..free_a.len() {
        sup_x = sup_x.max(euclid(&xa[i * d..(i + 1) * d], &xb[i * d..(i + 1) * d]));
        sup_v = sup_v.max(euclid(&free_a[i], &free_b[i]));
    }
    Ok(PathwiseBound {
        lhs: sup_x * sup_x,
        rhs: sup_v * sup_v + 4.0 * sup_v * (tva + tvb),
    })
}
