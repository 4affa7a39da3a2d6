//! Statistical studies of the convergence statements: coupled forward
//! convergence, convergence of the penalized field, uniform moment bounds
//! and continuity in the initial data.
//!
//! Studies never test a rate. Every verdict is a monotonicity or threshold
//! check computed only from estimates and standard errors stored in the
//! report.

use std::fmt::Write as _;
use std::io::Write;
use std::time::{Duration, Instant};

use crate::bsde::{FieldEstimate, FieldScheme, FieldSolver};
use crate::error::{Error, Result};
use crate::forward::{couple_and_compare_with, summarize_paths, terminal_decomposition, EnsembleSetup, PenaltyStepping, Scheme, TimeGrid};
use crate::oracle::{analytic_linear_solution, default_penalized_grid, fd_solve_neumann, fd_solve_penalized, interval_bounds, ks_two_sample, sup_gap_on_domain, Pde1DGrid};
use crate::output::fmt_float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    ForwardConvergence,
    FieldConvergence,
    MomentUniformity,
    InitialContinuity,
}

impl StudyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StudyKind::ForwardConvergence => "forward-convergence",
            StudyKind::FieldConvergence => "field-convergence",
            StudyKind::MomentUniformity => "moment-uniformity",
            StudyKind::InitialContinuity => "initial-continuity",
        }
    }
}

/// One estimated quantity of a sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub quantity: String,
    /// Penalization level, `reflected`, or the oracle name.
    pub scheme: String,
    pub t: Option<f64>,
    pub x: Vec<f64>,
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub criterion: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub kind: StudyKind,
    pub sweep: String,
    pub estimates: Vec<Estimate>,
    pub verdicts: Vec<Verdict>,
    pub seeds: Vec<u64>,
    pub wall_clock: Duration,
}

impl StudyReport {
    fn new(kind: StudyKind, sweep: String, seeds: Vec<u64>) -> Self {
        Self {
            kind,
            sweep,
            estimates: Vec::new(),
            verdicts: Vec::new(),
            seeds,
            wall_clock: Duration::ZERO,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn find(&self, quantity: &str, scheme: &str) -> impl Iterator<Item = &Estimate> {
        let (q, s) = (quantity.to_string(), scheme.to_string());
        self.estimates.iter().filter(move |e| e.quantity == q && e.scheme == s)
    }

    fn push(&mut self, quantity: &str, scheme: &str, t: Option<f64>, x: &[f64], value: f64, stderr: f64, samples: usize) {
        self.estimates.push(Estimate {
            quantity: quantity.into(),
            scheme: scheme.into(),
            t,
            x: x.to_vec(),
            value,
            stderr,
            samples,
        });
    }

    fn verdict(&mut self, criterion: &str, check: impl Into<String>, passed: bool, detail: String) {
        self.verdicts.push(Verdict {
            criterion: criterion.into(),
            check: check.into(),
            passed,
            detail,
        });
    }

    /// `quantity,scheme,t,x,value,stderr,samples`; multi-dimensional `x` is
    /// space-separated.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "quantity,scheme,t,x,value,stderr,samples")?;
        for e in &self.estimates {
            let t = e.t.map(fmt_float).unwrap_or_default();
            let x = e.x.iter().map(|v| fmt_float(*v)).collect::<Vec<_>>().join(" ");
            writeln!(w, "{},{},{t},{x},{},{},{}", e.quantity, e.scheme, fmt_float(e.value), fmt_float(e.stderr), e.samples)?;
        }
        Ok(())
    }

    /// `criterion,check,passed,detail`.
    pub fn write_verdicts_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "criterion,check,passed,detail")?;
        for v in &self.verdicts {
            writeln!(w, "{},{},{},\"{}\"", v.criterion, v.check, v.passed, v.detail.replace('"', "'"))?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "study: {}", self.kind.name());
        let _ = writeln!(s, "sweep: {}", self.sweep);
        let _ = writeln!(s, "seeds: {:?}", self.seeds);
        let _ = writeln!(s, "wall clock: {:.3} s", self.wall_clock.as_secs_f64());
        for e in &self.estimates {
            let at = match e.t {
                Some(t) => format!(" at t={t} x={:?}", e.x),
                None => String::new(),
            };
            let _ = writeln!(s, "  {} [{}]{at}: {:.6} +- {:.6}", e.quantity, e.scheme, e.value, e.stderr);
        }
        for v in &self.verdicts {
            let _ = writeln!(s, "{} {}/{}: {}", if v.passed { "PASS" } else { "FAIL" }, v.criterion, v.check, v.detail);
        }
        let _ = writeln!(s, "overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

/// Sample mean and its standard error.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
    (mean, (var / m as f64).sqrt())
}

/// Empirical `p`-quantile with a distribution-free standard error: half the
/// spread of the order statistics at `p -+ sqrt(p (1 - p) / M)`.
pub fn quantile_stderr(values: &[f64], p: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let at = |q: f64| v[((q.clamp(0.0, 1.0) * (m - 1) as f64).round() as usize).min(m - 1)];
    let w = (p * (1.0 - p) / m as f64).sqrt();
    (at(p), 0.5 * (at(p + w) - at(p - w)))
}

fn combined(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Consecutive means strictly decrease with every gap above `2` combined
/// standard errors. Exact zeros count as converged.
fn decreasing_beyond_noise(values: &[(f64, f64)]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for w in values.windows(2) {
        let ((a, sa), (b, sb)) = (w[0], w[1]);
        let good = (a == 0.0 && b == 0.0) || a - b > 2.0 * combined(sa, sb);
        ok &= good;
        parts.push(format!("{a:.4e}->{b:.4e}"));
    }
    (ok, parts.join(" "))
}

/// `final <= 0.5 initial` with a margin of `2` combined standard errors.
fn halved_beyond_noise(first: (f64, f64), last: (f64, f64)) -> (bool, String) {
    let margin = 2.0 * combined(last.1, 0.5 * first.1);
    let ok = (first.0 == 0.0 && last.0 == 0.0) || last.0 + margin <= 0.5 * first.0;
    (ok, format!("final {:.4e} + margin {margin:.2e} vs half initial {:.4e}", last.0, 0.5 * first.0))
}

fn check_sweep(n_values: &[f64]) -> Result<()> {
    if n_values.is_empty() {
        return Err(Error::invalid("sweep needs at least one penalization level"));
    }
    if n_values.iter().any(|n| !(*n > 0.0) || !n.is_finite()) {
        return Err(Error::invalid("penalization levels must be positive"));
    }
    if n_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("penalization levels must be strictly increasing"));
    }
    Ok(())
}

/// Coupled penalized/reflected distances over an `n` sweep.
#[derive(Debug, Clone)]
pub struct ForwardStudy<'a> {
    /// Ensemble inputs; the scheme is ignored.
    pub setup: EnsembleSetup<'a>,
    pub n_values: Vec<f64>,
    pub stepping: PenaltyStepping,
    pub criterion: String,
}

pub fn study_forward_convergence(study: &ForwardStudy<'_>) -> Result<StudyReport> {
    let clock = Instant::now();
    check_sweep(&study.n_values)?;
    let mut report = StudyReport::new(StudyKind::ForwardConvergence, format!("n = {:?}", study.n_values), vec![study.setup.seed]);
    let mut means: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
    for &n in &study.n_values {
        let sample = couple_and_compare_with(&study.setup, n, study.stepping)?;
        let label = format!("{n}");
        for (slot, (name, values)) in [("sup_state_distance", &sample.sup_state), ("sup_reflection_distance", &sample.sup_reflection)]
            .into_iter()
            .enumerate()
        {
            let (mean, se) = mean_stderr(values);
            report.push(name, &label, None, &[], mean, se, values.len());
            for (q, tag) in [(0.1, "q10"), (0.5, "q50"), (0.9, "q90")] {
                let (v, qs) = quantile_stderr(values, q);
                report.push(&format!("{name}_{tag}"), &label, None, &[], v, qs, values.len());
            }
            means[slot].push((mean, se));
        }
    }
    for (slot, name) in ["state", "reflection"].iter().enumerate() {
        let (ok, detail) = decreasing_beyond_noise(&means[slot]);
        report.verdict(&study.criterion, format!("{name}-decreasing"), ok, detail);
        let (ok, detail) = halved_beyond_noise(means[slot][0], *means[slot].last().unwrap());
        report.verdict(&study.criterion, format!("{name}-halved"), ok, detail);
    }
    report.wall_clock = clock.elapsed();
    Ok(report)
}

/// Reference values for field studies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldOracle {
    None,
    /// Eigenfunction solution on `(-1, 1)` with unit diffusion.
    Analytic { lambda: f64, mode: u32 },
    /// Neumann and penalized finite differences on the interval domain.
    FiniteDifference { cells: usize, steps: usize },
}

#[derive(Debug, Clone)]
pub struct FieldStudy<'a> {
    pub solver: FieldSolver<'a>,
    pub points: Vec<(f64, Vec<f64>)>,
    pub n_values: Vec<f64>,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub oracle: FieldOracle,
    pub criterion: String,
}

/// Paired difference of two estimates built from the same Brownian paths.
fn paired_gap(a: &FieldEstimate, b: &FieldEstimate) -> (f64, f64) {
    if a.samples.is_empty() || b.samples.is_empty() {
        return ((a.value[0] - b.value[0]).abs(), combined(a.stderr[0], b.stderr[0]));
    }
    let diffs: Vec<f64> = a.samples.iter().zip(&b.samples).map(|(x, y)| x - y).collect();
    let (m, se) = mean_stderr(&diffs);
    (m.abs(), se)
}

pub fn study_field_convergence(study: &FieldStudy<'_>) -> Result<StudyReport> {
    let clock = Instant::now();
    check_sweep(&study.n_values)?;
    if study.points.is_empty() {
        return Err(Error::invalid("field study needs at least one point"));
    }
    let solver = &study.solver;
    let mut report = StudyReport::new(
        StudyKind::FieldConvergence,
        format!("n = {:?}; points = {:?}", study.n_values, study.points),
        vec![study.seed],
    );
    let horizon = solver.horizon;

    // finite-difference references share one grid starting at the earliest point
    let fd = match study.oracle {
        FieldOracle::FiniteDifference { cells, steps } => {
            let start = study.points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            if start < horizon {
                let (lo, hi) = interval_bounds(solver.domain)?;
                let grid = Pde1DGrid::new(lo, hi, cells, steps, start, horizon)?;
                Some(fd_solve_neumann(solver.problem, solver.spec, solver.domain, &grid)?)
            } else {
                None
            }
        }
        _ => None,
    };

    for (t, x) in &study.points {
        let t = *t;
        let reflected = solver.evaluate(t, x, FieldScheme::Reflected, study.paths, study.steps, study.seed)?;
        report.push("u", "reflected", Some(t), x, reflected.value[0], reflected.stderr[0], study.paths);
        let mut gaps = Vec::new();
        for &n in &study.n_values {
            let pen = solver.evaluate(t, x, FieldScheme::Penalized(n), study.paths, study.steps, study.seed)?;
            let label = format!("{n}");
            report.push("u", &label, Some(t), x, pen.value[0], pen.stderr[0], study.paths);
            let gap = paired_gap(&pen, &reflected);
            report.push("gap", &label, Some(t), x, gap.0, gap.1, study.paths);
            gaps.push(gap);
        }
        let at = format!("t={t} x={x:?}");
        let strictly = gaps.windows(2).all(|w| (w[0].0 == 0.0 && w[1].0 == 0.0) || w[1].0 < w[0].0);
        let listing = gaps.iter().map(|g| format!("{:.4e}", g.0)).collect::<Vec<_>>().join(" ");
        report.verdict(&study.criterion, format!("gap-decreasing {at}"), strictly, listing);
        let (ok, detail) = halved_beyond_noise(gaps[0], *gaps.last().unwrap());
        report.verdict(&study.criterion, format!("gap-halved {at}"), ok, detail);

        let reference = match study.oracle {
            FieldOracle::Analytic { lambda, mode } => Some(("analytic", analytic_linear_solution(lambda, mode, t, x[0], horizon))),
            FieldOracle::FiniteDifference { .. } => match &fd {
                Some(field) => {
                    let m = (((t - field.grid.start) / field.grid.dt()).round() as usize).min(field.grid.steps);
                    Some(("fd", field.interpolate(m, x[0], 0)))
                }
                None => {
                    let mut g = vec![0.0; solver.problem.k_dim()];
                    solver.problem.terminal(x, &mut g);
                    Some(("fd", g[0]))
                }
            },
            FieldOracle::None => None,
        };
        if let Some((name, value)) = reference {
            report.push("u", name, Some(t), x, value, 0.0, 0);
            let err = (reflected.value[0] - value).abs();
            let tol = 0.02f64.max(3.0 * reflected.stderr[0]);
            report.verdict(&study.criterion, format!("oracle {at}"), err <= tol, format!("|u - {name}| = {err:.4e} <= {tol:.4e}"));
        }
    }

    if let (FieldOracle::FiniteDifference { cells, steps }, Some(neumann)) = (study.oracle, &fd) {
        let wide = default_penalized_grid(solver.domain, cells, steps, neumann.grid.start, horizon)?;
        let mut last = f64::INFINITY;
        let mut strictly = true;
        let mut listing = Vec::new();
        for &n in &study.n_values {
            let pen = fd_solve_penalized(solver.problem, solver.spec, solver.domain, n, &wide)?;
            let gap = sup_gap_on_domain(&pen, neumann);
            report.push("fd_sup_gap", &format!("{n}"), Some(neumann.grid.start), &[], gap, 0.0, 0);
            for w in &pen.warnings {
                report.verdict(&study.criterion, format!("fd-pad n={n}"), false, w.clone());
            }
            strictly &= gap < last;
            last = gap;
            listing.push(format!("{gap:.4e}"));
        }
        report.verdict(&study.criterion, "fd-gap-decreasing", strictly, listing.join(" "));
        report.verdict(&study.criterion, "fd-gap-final", last <= 0.05, format!("{last:.4e} <= 0.05"));
    }
    report.wall_clock = clock.elapsed();
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct MomentStudy<'a> {
    /// Ensemble inputs; the scheme is ignored.
    pub setup: EnsembleSetup<'a>,
    pub n_values: Vec<f64>,
    pub q_values: Vec<u32>,
    pub stepping: PenaltyStepping,
    /// Levels below this are reported but not judged.
    pub min_n: f64,
    pub criterion: String,
}

pub fn study_moment_uniformity(study: &MomentStudy<'_>) -> Result<StudyReport> {
    let clock = Instant::now();
    check_sweep(&study.n_values)?;
    if study.q_values.is_empty() || study.q_values.iter().any(|q| !(1..=2).contains(q)) {
        return Err(Error::invalid("moment orders must be 1 or 2"));
    }
    let mut report = StudyReport::new(
        StudyKind::MomentUniformity,
        format!("n = {:?}; q = {:?}", study.n_values, study.q_values),
        vec![study.setup.seed],
    );
    // cells[q][moment] = (n, mean)
    let mut cells = vec![vec![Vec::new(); 3]; study.q_values.len()];
    for &n in &study.n_values {
        let setup = study.setup.with_scheme(Scheme::Penalized { n, stepping: study.stepping });
        let summary = summarize_paths(&setup)?;
        for (qi, &q) in study.q_values.iter().enumerate() {
            let qf = q as f64;
            let samples: [(&str, Vec<f64>); 3] = [
                ("sup_state_moment", summary.iter().map(|s| s.sup_state.powf(2.0 * qf)).collect()),
                ("sup_reflection_moment", summary.iter().map(|s| s.sup_reflection.powf(2.0 * qf)).collect()),
                ("variation_moment", summary.iter().map(|s| s.variation.powf(qf)).collect()),
            ];
            for (mi, (name, v)) in samples.iter().enumerate() {
                let (mean, se) = mean_stderr(v);
                report.push(&format!("{name}_q{q}"), &format!("{n}"), None, &[], mean, se, v.len());
                if n >= study.min_n {
                    cells[qi][mi].push(mean);
                }
            }
        }
    }
    for (qi, &q) in study.q_values.iter().enumerate() {
        for (mi, name) in ["sup_state", "sup_reflection", "variation"].iter().enumerate() {
            let vals = &cells[qi][mi];
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let (ok, ratio) = if vals.is_empty() {
                (false, f64::NAN)
            } else if max == 0.0 {
                (true, 1.0)
            } else {
                let r = max / min;
                (r <= 2.0, r)
            };
            report.verdict(&study.criterion, format!("{name}-q{q}-ratio"), ok, format!("max/min = {ratio:.4} <= 2 over n >= {}", study.min_n));
        }
    }
    report.wall_clock = clock.elapsed();
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ContinuityStudy<'a> {
    pub solver: FieldSolver<'a>,
    pub limit: (f64, Vec<f64>),
    pub sequence: Vec<(f64, Vec<f64>)>,
    pub scheme: FieldScheme,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Eigenfunction parameters `(lambda, mode)` when the analytic solution applies.
    pub oracle: Option<(f64, u32)>,
    pub criterion: String,
}

/// Two-sample KS critical value at level 0.001.
fn ks_critical(m: usize, n: usize) -> f64 {
    1.949 * (((m + n) as f64) / (m as f64 * n as f64)).sqrt()
}

pub fn study_initial_continuity(study: &ContinuityStudy<'_>) -> Result<StudyReport> {
    let clock = Instant::now();
    if study.sequence.is_empty() {
        return Err(Error::invalid("continuity study needs a nonempty sequence"));
    }
    let solver = &study.solver;
    let mut report = StudyReport::new(
        StudyKind::InitialContinuity,
        format!("limit = {:?}; sequence = {:?}", study.limit, study.sequence),
        vec![study.seed],
    );
    let label = study.scheme.label();
    let terminal_law = |t: f64, x: &[f64]| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if t >= solver.horizon {
            let d = x.len();
            return Ok(vec![(x.to_vec(), vec![0.0; d]); study.paths]);
        }
        terminal_decomposition(&EnsembleSetup {
            spec: solver.spec,
            domain: solver.domain,
            scheme: study.scheme.scheme(),
            grid: TimeGrid::new(t, solver.horizon, study.steps)?,
            x0: x,
            seed: study.seed,
            paths: study.paths,
        })
    };
    let (t0, x0) = (&study.limit.0, &study.limit.1);
    let base = solver.evaluate(*t0, x0, study.scheme, study.paths, study.steps, study.seed)?;
    report.push("u", &label, Some(*t0), x0, base.value[0], base.stderr[0], study.paths);
    let base_law = terminal_law(*t0, x0)?;
    let column = |law: &[(Vec<f64>, Vec<f64>)], which: usize, c: usize| -> Vec<f64> {
        law.iter().map(|(x, k)| if which == 0 { x[c] } else { k[c] }).collect()
    };
    let d = x0.len();
    let crit = ks_critical(study.paths, study.paths);
    // ks[which * d + c] holds the distance sequence of one coordinate
    let mut ks_seq = vec![Vec::new(); 2 * d];
    for (t, x) in study.sequence.iter() {
        let est = solver.evaluate(*t, x, study.scheme, study.paths, study.steps, study.seed)?;
        report.push("u", &label, Some(*t), x, est.value[0], est.stderr[0], study.paths);
        let diff = (est.value[0] - base.value[0]).abs();
        let se = combined(est.stderr[0], base.stderr[0]);
        report.push("u_increment", &label, Some(*t), x, diff, se, study.paths);
        let allowance = match study.oracle {
            Some((lambda, mode)) => {
                let a = analytic_linear_solution(lambda, mode, *t, x[0], solver.horizon);
                let b = analytic_linear_solution(lambda, mode, *t0, x0[0], solver.horizon);
                report.push("u", "analytic", Some(*t), x, a, 0.0, 0);
                (a - b).abs()
            }
            None => 0.0,
        };
        let at = format!("t={t} x={x:?}");
        report.verdict(
            &study.criterion,
            format!("field {at}"),
            diff <= allowance + 3.0 * se,
            format!("|u_j - u| = {diff:.4e} <= {allowance:.4e} + 3 * {se:.2e}"),
        );
        let law = terminal_law(*t, x)?;
        for (which, name) in ["ks_state", "ks_reflection"].iter().enumerate() {
            for c in 0..d {
                let ks = ks_two_sample(&column(&law, which, c), &column(&base_law, which, c));
                report.push(&format!("{name}_{c}"), &label, Some(*t), x, ks, crit / 1.949, study.paths);
                ks_seq[which * d + c].push(ks);
            }
        }
    }
    // the law distance must shrink along the sequence until it reaches the
    // two-sample noise level
    for (which, name) in ["state", "reflection"].iter().enumerate() {
        for c in 0..d {
            let seq = &ks_seq[which * d + c];
            let ok = seq.windows(2).all(|w| w[1] < w[0] || (w[0] <= crit && w[1] <= crit));
            let listing = seq.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>().join(" ");
            report.verdict(&study.criterion, format!("law-{name}-{c}"), ok, format!("KS {listing}; noise level {crit:.4e}"));
        }
    }
    report.wall_clock = clock.elapsed();
    Ok(report)
}
