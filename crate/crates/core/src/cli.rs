//! Runs a parsed configuration and writes its artifacts.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::bsde::{martingale_residual_report, solve_bsde, FieldSolver};
use crate::config::{Command, OracleConfig, ProblemConfig, RunConfig};
use crate::diffusion::DiffusionSpec;
use crate::error::{Error, Result};
use crate::experiments::{
    study_field_convergence, study_forward_convergence, study_initial_continuity, study_moment_uniformity, ContinuityStudy, FieldOracle, FieldStudy,
    ForwardStudy, MomentStudy, StudyReport,
};
use crate::forward::{EnsembleSetup, PathEnsemble};
use crate::geometry::ConvexDomain;
use crate::oracle::{default_penalized_grid, fd_solve_neumann, fd_solve_penalized, interval_bounds, Pde1DGrid};
use crate::output::{fmt_float, write_bsde_csv, write_ensemble_csv, write_field_csv};
use crate::problem::Problem;

/// Orthogonality tolerance for the martingale residual report.
const ORTHOGONALITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// False when a study verdict failed.
    pub passed: bool,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

struct Inputs {
    domain: ConvexDomain,
    spec: DiffusionSpec,
    problem: Option<Problem>,
    x0: Vec<f64>,
}

impl Inputs {
    fn new(config: &RunConfig) -> Result<Self> {
        let domain = config.domain.build()?;
        let spec = config.diffusion.build(domain.dim())?;
        Ok(Self {
            domain,
            spec,
            problem: config.problem.as_ref().map(ProblemConfig::build),
            x0: config.x0(),
        })
    }

    fn problem(&self) -> Result<&Problem> {
        self.problem.as_ref().ok_or_else(|| Error::invalid("this command needs a [problem] section"))
    }

    fn setup<'a>(&'a self, config: &RunConfig) -> Result<EnsembleSetup<'a>> {
        Ok(EnsembleSetup {
            spec: &self.spec,
            domain: &self.domain,
            scheme: config.scheme.scheme(),
            grid: config.grid.build()?,
            x0: &self.x0,
            seed: config.ensemble.seed,
            paths: config.ensemble.paths,
        })
    }

    fn solver<'a>(&'a self, config: &RunConfig) -> Result<FieldSolver<'a>> {
        Ok(FieldSolver {
            spec: &self.spec,
            domain: &self.domain,
            problem: self.problem()?,
            options: config.bsde,
            horizon: config.grid.horizon,
        })
    }
}

struct Artifacts<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Artifacts<'_> {
    fn write(&mut self, name: &str, fill: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        fill(&mut w)?;
        std::io::Write::flush(&mut w)?;
        self.files.push(path);
        Ok(())
    }
}

fn split_point(row: &[f64]) -> (f64, Vec<f64>) {
    (row[0], row[1..].to_vec())
}

/// Executes `config`, writing CSV artifacts and `summary.txt` into `out_dir`.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out_dir)?;
    let inputs = Inputs::new(config)?;
    let mut art = Artifacts { dir: out_dir, files: Vec::new() };
    let mut summary = format!("command: {}\n", config.command.name());
    let mut passed = true;

    match config.command {
        Command::SimulateForward => {
            let setup = inputs.setup(config)?;
            let ensemble = PathEnsemble::simulate(&setup)?;
            art.write("ensemble.csv", |w| write_ensemble_csv(&ensemble, w))?;
            let m = ensemble.len() as f64;
            let mean_k = ensemble.paths.iter().map(|p| *p.k.last().unwrap()).sum::<f64>() / m;
            let domain = &inputs.domain;
            let max_level = ensemble
                .paths
                .iter()
                .flat_map(|p| (0..p.nodes()).map(move |i| domain.level(p.state(i))))
                .fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(summary, "scheme: {}", ensemble.scheme.label());
            let _ = writeln!(summary, "paths: {}  steps: {}", ensemble.len(), ensemble.grid.steps());
            let _ = writeln!(summary, "mean terminal boundary measure: {mean_k:.6}");
            let _ = writeln!(summary, "max level over all nodes: {max_level:.3e}");
        }
        Command::SolveBsde => {
            let setup = inputs.setup(config)?;
            let ensemble = PathEnsemble::simulate(&setup)?;
            let solution = solve_bsde(&ensemble, &inputs.domain, inputs.problem()?, config.bsde)?;
            let report = martingale_residual_report(&solution, &ensemble, &inputs.domain, config.bsde.basis, ORTHOGONALITY_TOL)?;
            art.write("bsde.csv", |w| write_bsde_csv(&solution, w))?;
            art.write("diagnostics.csv", |w| {
                use std::io::Write;
                writeln!(w, "step,basis_size,rank,residual_rms,orthogonality")?;
                for d in &solution.diagnostics {
                    writeln!(w, "{},{},{},{},{}", d.step, d.basis_size, d.rank, fmt_float(d.residual_rms), fmt_float(d.orthogonality))?;
                }
                Ok(())
            })?;
            let _ = writeln!(
                summary,
                "Y0 mean: {:?}  stderr: {:?}",
                solution.initial_mean(),
                solution.initial_stderr()
            );
            let _ = writeln!(
                summary,
                "cumulative residual mean: {:?}  stderr: {:?}",
                report.cumulative_mean, report.cumulative_stderr
            );
            let worst = report.orthogonality.iter().cloned().fold(0.0, f64::max);
            let _ = writeln!(summary, "max orthogonality residual: {worst:.3e}; flagged steps: {:?}", report.flagged);
        }
        Command::EvaluateField => {
            let solver = inputs.solver(config)?;
            let scheme = config.scheme.field_scheme();
            let mut estimates = Vec::with_capacity(config.points.len());
            for row in &config.points {
                let (t, x) = split_point(row);
                let e = solver.evaluate(t, &x, scheme, config.ensemble.paths, config.grid.steps, config.ensemble.seed)?;
                let _ = writeln!(summary, "u({t}, {x:?}) = {:?} +- {:?}", e.value, e.stderr);
                estimates.push(e);
            }
            art.write("field.csv", |w| write_field_csv(&estimates, w))?;
        }
        Command::SolveFd => {
            let (lo, hi) = interval_bounds(&inputs.domain)?;
            let problem = inputs.problem()?;
            let (g, start, horizon) = (config.fd, config.grid.start, config.grid.horizon);
            let field = match config.scheme.field_scheme() {
                crate::bsde::FieldScheme::Reflected => fd_solve_neumann(problem, &inputs.spec, &inputs.domain, &Pde1DGrid::new(lo, hi, g.cells, g.steps, start, horizon)?)?,
                crate::bsde::FieldScheme::Penalized(n) => {
                    let grid = default_penalized_grid(&inputs.domain, g.cells, g.steps, start, horizon)?;
                    fd_solve_penalized(problem, &inputs.spec, &inputs.domain, n, &grid)?
                }
            };
            art.write("fd.csv", |w| field.write_csv(w))?;
            let _ = writeln!(summary, "grid: [{}, {}] with {} cells, {} time steps", field.grid.x_lo, field.grid.x_hi, field.grid.cells, field.grid.steps);
            for x in [lo, 0.5 * (lo + hi), hi] {
                let _ = writeln!(summary, "u({start}, {x}) = {:.6}", field.initial(x, 0));
            }
            for w in &field.warnings {
                let _ = writeln!(summary, "warning: {w}");
            }
        }
        Command::StudyForwardConvergence
        | Command::StudyFieldConvergence
        | Command::StudyMomentUniformity
        | Command::StudyInitialContinuity => {
            let report = run_study(config, &inputs)?;
            art.write("report.csv", |w| report.write_csv(w))?;
            art.write("verdicts.csv", |w| report.write_verdicts_csv(w))?;
            summary.push_str(&report.summary());
            passed = report.passed();
        }
    }
    art.write("summary.txt", |w| {
        use std::io::Write;
        w.write_all(summary.as_bytes())?;
        Ok(())
    })?;
    Ok(RunOutcome {
        passed,
        summary,
        files: art.files,
    })
}

fn run_study(config: &RunConfig, inputs: &Inputs) -> Result<StudyReport> {
    let sweep = &config.sweep;
    let stepping = config.scheme.stepping();
    let default_id = match config.command {
        Command::StudyForwardConvergence => "forward-convergence",
        Command::StudyFieldConvergence => "field-convergence",
        Command::StudyMomentUniformity => "moment-uniformity",
        _ => "initial-continuity",
    };
    let criterion = config.criterion_or(default_id);
    let analytic = match (&config.problem, sweep.oracle) {
        (Some(ProblemConfig::Eigenfunction { lambda, mode }), OracleConfig::Analytic) => Some((*lambda, *mode)),
        _ => None,
    };
    match config.command {
        Command::StudyForwardConvergence => study_forward_convergence(&ForwardStudy {
            setup: inputs.setup(config)?,
            n_values: sweep.n.clone(),
            stepping,
            criterion,
        }),
        Command::StudyMomentUniformity => study_moment_uniformity(&MomentStudy {
            setup: inputs.setup(config)?,
            n_values: sweep.n.clone(),
            q_values: sweep.q.clone(),
            stepping,
            min_n: sweep.min_n,
            criterion,
        }),
        Command::StudyFieldConvergence => study_field_convergence(&FieldStudy {
            solver: inputs.solver(config)?,
            points: sweep.points.iter().map(|r| split_point(r)).collect(),
            n_values: sweep.n.clone(),
            paths: config.ensemble.paths,
            steps: config.grid.steps,
            seed: config.ensemble.seed,
            oracle: match sweep.oracle {
                OracleConfig::None => FieldOracle::None,
                OracleConfig::Analytic => {
                    let (lambda, mode) = analytic.ok_or_else(|| Error::invalid("analytic oracle needs the eigenfunction problem"))?;
                    FieldOracle::Analytic { lambda, mode }
                }
                OracleConfig::Fd => FieldOracle::FiniteDifference {
                    cells: config.fd.cells,
                    steps: config.fd.steps,
                },
            },
            criterion,
        }),
        _ => {
            let limit = sweep.limit.as_ref().ok_or_else(|| Error::invalid("continuity study needs sweep.limit"))?;
            study_initial_continuity(&ContinuityStudy {
                solver: inputs.solver(config)?,
                limit: split_point(limit),
                sequence: sweep.sequence.iter().map(|r| split_point(r)).collect(),
                scheme: config.scheme.field_scheme(),
                paths: config.ensemble.paths,
                steps: config.grid.steps,
                seed: config.ensemble.seed,
                oracle: analytic,
                criterion,
            })
        }
    }
}
