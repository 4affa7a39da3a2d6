//! Run configuration in TOML.
//!
//! ```toml
//! command = "evaluate-field"
//!
//! [domain]
//! kind = "interval"          # ball | ellipsoid | interval
//! lo = -1.0
//! hi = 1.0
//!
//! [diffusion]
//! kind = "brownian"          # brownian | constant-drift | custom-table
//! scale = 1.0
//!
//! [problem]
//! kind = "eigenfunction"     # eigenfunction | robin | constant | custom-polynomial
//! lambda = 0.3
//! mode = 1
//!
//! [grid]
//! start = 0.0
//! horizon = 1.0
//! steps = 400
//!
//! [ensemble]
//! paths = 10000
//! seed = 7
//!
//! [field]
//! points = [[0.0, -0.5]]     # rows of (t, x...)
//! ```
//!
//! Parsing collects every problem it finds (unknown keys, missing keys,
//! wrong types, out-of-range values) with the dotted path of the offending
//! key. Omitted optional keys take the defaults of [`RunConfig`] and are
//! written out explicitly by [`RunConfig::to_toml`].

use std::cell::RefCell;
use std::collections::BTreeSet;

use toml::{Table, Value};

use crate::bsde::{BsdeOptions, FieldScheme, Stepping};
use crate::diffusion::{DiffusionSpec, DiffusionTable};
use crate::error::{ConfigErrors, Error, Result};
use crate::forward::{PenaltyStepping, Scheme, TimeGrid};
use crate::geometry::ConvexDomain;
use crate::problem::Problem;
use crate::regression::BasisSpec;

pub const MAX_STEPS: i64 = 10_000_000;
pub const MAX_PATHS: i64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SimulateForward,
    SolveBsde,
    EvaluateField,
    SolveFd,
    StudyForwardConvergence,
    StudyFieldConvergence,
    StudyMomentUniformity,
    StudyInitialContinuity,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::SimulateForward,
        Command::SolveBsde,
        Command::EvaluateField,
        Command::SolveFd,
        Command::StudyForwardConvergence,
        Command::StudyFieldConvergence,
        Command::StudyMomentUniformity,
        Command::StudyInitialContinuity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Command::SimulateForward => "simulate-forward",
            Command::SolveBsde => "solve-bsde",
            Command::EvaluateField => "evaluate-field",
            Command::SolveFd => "solve-fd",
            Command::StudyForwardConvergence => "study-forward-convergence",
            Command::StudyFieldConvergence => "study-field-convergence",
            Command::StudyMomentUniformity => "study-moment-uniformity",
            Command::StudyInitialContinuity => "study-initial-continuity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn needs_problem(&self) -> bool {
        matches!(
            self,
            Command::SolveBsde | Command::EvaluateField | Command::SolveFd | Command::StudyFieldConvergence | Command::StudyInitialContinuity
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainConfig {
    Ball { center: Vec<f64>, radius: f64 },
    Ellipsoid { center: Vec<f64>, semi_axes: Vec<f64> },
    Interval { lo: f64, hi: f64 },
}

impl DomainConfig {
    pub fn dim(&self) -> usize {
        match self {
            DomainConfig::Ball { center, .. } | DomainConfig::Ellipsoid { center, .. } => center.len(),
            DomainConfig::Interval { .. } => 1,
        }
    }

    pub fn center(&self) -> Vec<f64> {
        match self {
            DomainConfig::Ball { center, .. } | DomainConfig::Ellipsoid { center, .. } => center.clone(),
            DomainConfig::Interval { lo, hi } => vec![0.5 * (lo + hi)],
        }
    }

    pub fn build(&self) -> Result<ConvexDomain> {
        match self {
            DomainConfig::Ball { center, radius } => ConvexDomain::ball(center.clone(), *radius),
            DomainConfig::Ellipsoid { center, semi_axes } => ConvexDomain::ellipsoid(center.clone(), semi_axes.clone()),
            DomainConfig::Interval { lo, hi } => ConvexDomain::interval(*lo, *hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionConfig {
    Brownian { scale: f64 },
    ConstantDrift { drift: Vec<f64>, scale: f64 },
    Table { nodes: Vec<f64>, drift: Vec<f64>, sigma: Vec<f64> },
}

impl DiffusionConfig {
    pub fn build(&self, dim: usize) -> Result<DiffusionSpec> {
        Ok(match self {
            DiffusionConfig::Brownian { scale } => DiffusionSpec::brownian(dim, *scale),
            DiffusionConfig::ConstantDrift { drift, scale } => DiffusionSpec::ConstantDrift {
                drift: drift.clone(),
                scale: *scale,
            },
            DiffusionConfig::Table { nodes, drift, sigma } => DiffusionSpec::Table(DiffusionTable::new(dim, nodes.clone(), drift.clone(), sigma.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemConfig {
    Eigenfunction { lambda: f64, mode: u32 },
    Robin { coefficient: f64, terminal: f64 },
    Constant { driver: f64, boundary: f64, terminal: f64 },
    Polynomial { f: [f64; 2], h: [f64; 2], g: Vec<f64> },
}

impl ProblemConfig {
    pub fn build(&self) -> Problem {
        match self {
            ProblemConfig::Eigenfunction { lambda, mode } => Problem::Eigenfunction { lambda: *lambda, mode: *mode },
            ProblemConfig::Robin { coefficient, terminal } => Problem::Robin {
                coefficient: *coefficient,
                terminal: *terminal,
            },
            ProblemConfig::Constant { driver, boundary, terminal } => Problem::Constant {
                driver: *driver,
                boundary: *boundary,
                terminal: *terminal,
            },
            ProblemConfig::Polynomial { f, h, g } => Problem::Polynomial { f: *f, h: *h, g: g.clone() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub start: f64,
    pub horizon: f64,
    pub steps: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.start, self.horizon, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub paths: usize,
    pub seed: u64,
    /// Starting point; the domain center when omitted.
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchemeConfig {
    Reflected,
    Penalized { n: f64, stepping: PenaltyStepping },
}

impl SchemeConfig {
    pub fn scheme(&self) -> Scheme {
        match self {
            SchemeConfig::Reflected => Scheme::Reflected,
            SchemeConfig::Penalized { n, stepping } => Scheme::Penalized { n: *n, stepping: *stepping },
        }
    }

    pub fn field_scheme(&self) -> FieldScheme {
        match self {
            SchemeConfig::Reflected => FieldScheme::Reflected,
            SchemeConfig::Penalized { n, .. } => FieldScheme::Penalized(*n),
        }
    }

    pub fn stepping(&self) -> PenaltyStepping {
        match self {
            SchemeConfig::Reflected => PenaltyStepping::SemiImplicit,
            SchemeConfig::Penalized { stepping, .. } => *stepping,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleConfig {
    None,
    Analytic,
    Fd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub n: Vec<f64>,
    pub q: Vec<u32>,
    pub min_n: f64,
    /// Rows of `(t, x...)`.
    pub points: Vec<Vec<f64>>,
    pub oracle: OracleConfig,
    /// `(t, x...)` of the limit point for continuity studies.
    pub limit: Option<Vec<f64>>,
    pub sequence: Vec<Vec<f64>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n: vec![4.0, 16.0, 64.0, 256.0],
            q: vec![1, 2],
            min_n: 16.0,
            points: Vec::new(),
            oracle: OracleConfig::None,
            limit: None,
            sequence: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub cells: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub domain: DomainConfig,
    pub diffusion: DiffusionConfig,
    pub problem: Option<ProblemConfig>,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    pub scheme: SchemeConfig,
    pub bsde: BsdeOptions,
    /// Field evaluation points, rows of `(t, x...)`.
    pub points: Vec<Vec<f64>>,
    pub sweep: SweepConfig,
    pub fd: FdConfig,
    /// Criterion id attached to study verdicts; the study name by default.
    pub criterion: Option<String>,
    pub output_dir: Option<String>,
}

impl RunConfig {
    pub fn x0(&self) -> Vec<f64> {
        self.ensemble.x0.clone().unwrap_or_else(|| self.domain.center())
    }

    pub fn criterion_or(&self, default: &str) -> String {
        self.criterion.clone().unwrap_or_else(|| default.to_string())
    }
}

struct Issues(RefCell<ConfigErrors>);

impl Issues {
    fn push(&self, path: &str, msg: impl Into<String>) {
        self.0.borrow_mut().push(path, msg);
    }
}

/// Typed, path-aware view of one TOML table. Unknown keys are reported by
/// [`Section::finish`].
struct Section<'a> {
    issues: &'a Issues,
    path: String,
    table: Option<&'a Table>,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> Section<'a> {
    fn key_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn raw(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key.to_string());
        self.table.and_then(|t| t.get(key))
    }

    fn required<T>(&self, key: &str, v: Option<T>) -> Option<T> {
        if v.is_none() && self.raw(key).is_none() {
            self.issues.push(&self.key_path(key), "missing required key");
        }
        v
    }

    fn number(&self, key: &str, v: &Value) -> Option<f64> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.issues.push(&self.key_path(key), format!("expected a number, found {}", v.type_str()));
                None
            }
        }
    }

    fn opt_float(&self, key: &str) -> Option<f64> {
        let v = self.raw(key)?;
        self.number(key, v)
    }

    fn float(&self, key: &str) -> Option<f64> {
        let v = self.opt_float(key);
        self.required(key, v)
    }

    fn opt_int(&self, key: &str) -> Option<i64> {
        match self.raw(key)? {
            Value::Integer(i) => Some(*i),
            v => {
                self.issues.push(&self.key_path(key), format!("expected an integer, found {}", v.type_str()));
                None
            }
        }
    }

    fn opt_bool(&self, key: &str) -> Option<bool> {
        match self.raw(key)? {
            Value::Boolean(b) => Some(*b),
            v => {
                self.issues.push(&self.key_path(key), format!("expected a boolean, found {}", v.type_str()));
                None
            }
        }
    }

    fn opt_string(&self, key: &str) -> Option<&'a str> {
        match self.raw(key)? {
            Value::String(s) => Some(s.as_str()),
            v => {
                self.issues.push(&self.key_path(key), format!("expected a string, found {}", v.type_str()));
                None
            }
        }
    }

    fn string(&self, key: &str) -> Option<&'a str> {
        let v = self.opt_string(key);
        self.required(key, v)
    }

    fn opt_floats(&self, key: &str) -> Option<Vec<f64>> {
        match self.raw(key)? {
            Value::Array(a) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    out.push(self.number(&format!("{key}[{i}]"), v)?);
                }
                Some(out)
            }
            v => {
                self.issues.push(&self.key_path(key), format!("expected an array of numbers, found {}", v.type_str()));
                None
            }
        }
    }

    fn floats(&self, key: &str) -> Option<Vec<f64>> {
        let v = self.opt_floats(key);
        self.required(key, v)
    }

    fn opt_rows(&self, key: &str) -> Option<Vec<Vec<f64>>> {
        match self.raw(key)? {
            Value::Array(rows) => {
                let mut out = Vec::with_capacity(rows.len());
                for (i, row) in rows.iter().enumerate() {
                    let Value::Array(a) = row else {
                        self.issues.push(&self.key_path(&format!("{key}[{i}]")), "expected an array of numbers");
                        return None;
                    };
                    let mut r = Vec::with_capacity(a.len());
                    for (j, v) in a.iter().enumerate() {
                        r.push(self.number(&format!("{key}[{i}][{j}]"), v)?);
                    }
                    out.push(r);
                }
                Some(out)
            }
            v => {
                self.issues.push(&self.key_path(key), format!("expected an array of arrays, found {}", v.type_str()));
                None
            }
        }
    }

    fn sub(&self, key: &str) -> Section<'a> {
        let table = match self.raw(key) {
            Some(Value::Table(t)) => Some(t),
            Some(v) => {
                self.issues.push(&self.key_path(key), format!("expected a table, found {}", v.type_str()));
                None
            }
            None => None,
        };
        Section {
            issues: self.issues,
            path: self.key_path(key),
            table,
            used: RefCell::new(BTreeSet::new()),
        }
    }

    fn present(&self) -> bool {
        self.table.is_some()
    }

    fn check(&self, key: &str, ok: bool, msg: impl Into<String>) {
        if !ok {
            self.issues.push(&self.key_path(key), msg);
        }
    }

    fn finish(&self) {
        if let Some(t) = self.table {
            let used = self.used.borrow();
            for k in t.keys() {
                if !used.contains(k) {
                    self.issues.push(&self.key_path(k), "unknown key");
                }
            }
        }
    }
}

fn positive(v: Option<f64>) -> bool {
    v.is_none_or(|v| v > 0.0 && v.is_finite())
}

fn finite(v: &Option<Vec<f64>>) -> bool {
    v.as_ref().is_none_or(|v| v.iter().all(|x| x.is_finite()))
}

/// Parses and validates a configuration, reporting every issue found.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, None)
}

/// As [`parse_config`]; a given `command` replaces the `command` key, which
/// then becomes optional.
pub fn parse_config_with(text: &str, command: Option<Command>) -> Result<RunConfig> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| {
        let mut errs = ConfigErrors::default();
        errs.push("<document>", e.message().to_string());
        Error::Config(errs)
    })?;
    let issues = Issues(RefCell::new(ConfigErrors::default()));
    let root = Section {
        issues: &issues,
        path: String::new(),
        table: Some(&table),
        used: RefCell::new(BTreeSet::new()),
    };

    let from_text = if command.is_some() { root.opt_string("command") } else { root.string("command") };
    let parsed = from_text.and_then(|s| {
        let c = Command::parse(s);
        if c.is_none() {
            let names: Vec<_> = Command::ALL.iter().map(|c| c.name()).collect();
            issues.push("command", format!("unknown command '{s}'; expected one of {}", names.join(", ")));
        }
        c
    });
    let command = command.or(parsed);

    let domain = parse_domain(&root.sub("domain"));
    let dim = domain.as_ref().map(|d| d.dim()).or_else(|| declared_dim(&table));
    let diffusion = parse_diffusion(&root.sub("diffusion"), dim);
    let problem_section = root.sub("problem");
    let problem = if problem_section.present() { parse_problem(&problem_section) } else { None };
    if !problem_section.present() && command.is_some_and(|c| c.needs_problem()) {
        issues.push("problem", "missing required section for this command");
    }
    let grid = parse_grid(&root.sub("grid"));
    let ensemble = parse_ensemble(&root.sub("ensemble"), dim);
    let scheme = parse_scheme(&root.sub("scheme"));
    let bsde = parse_bsde(&root.sub("bsde"));
    let points = parse_field(&root.sub("field"), dim);
    let sweep = parse_sweep(&root.sub("sweep"), dim);
    let fd = parse_fd(&root.sub("fd"));
    let criterion = root.opt_string("criterion").map(str::to_string);
    let output_dir = root.opt_string("output_dir").map(str::to_string);
    root.finish();

    if let (Some(d), Some(e)) = (&domain, &ensemble) {
        if let (Ok(dom), Some(x0)) = (d.build(), &e.x0) {
            if matches!(scheme, Some(SchemeConfig::Reflected)) && x0.len() == dom.dim() && !dom.contains(x0) {
                issues.push("ensemble.x0", "reflected scheme needs a starting point in the closed domain");
            }
        }
    }
    if let (Some(Command::StudyFieldConvergence | Command::EvaluateField), Some(p)) = (command, &points) {
        if command == Some(Command::EvaluateField) && p.is_empty() {
            issues.push("field.points", "evaluate-field needs at least one point");
        }
    }
    if let (Some(g), Some(p), Some(s)) = (&grid, &points, &sweep) {
        for (name, rows) in [("field.points", p), ("sweep.points", &s.points), ("sweep.sequence", &s.sequence)] {
            for (i, row) in rows.iter().enumerate() {
                if !(row[0] >= 0.0 && row[0] <= g.horizon) {
                    issues.push(&format!("{name}[{i}]"), format!("time {} outside [0, {}]", row[0], g.horizon));
                }
            }
        }
    }
    if let (Some(Command::StudyFieldConvergence), Some(s)) = (command, &sweep) {
        if s.points.is_empty() {
            issues.push("sweep.points", "field study needs at least one point");
        }
    }
    if let (Some(Command::StudyInitialContinuity), Some(s)) = (command, &sweep) {
        if s.limit.is_none() {
            issues.push("sweep.limit", "missing required key");
        }
        if s.sequence.is_empty() {
            issues.push("sweep.sequence", "continuity study needs a nonempty sequence");
        }
    }
    if let Some(s) = &sweep {
        if s.oracle == OracleConfig::Analytic && !matches!(problem, Some(ProblemConfig::Eigenfunction { .. })) {
            issues.push("sweep.oracle", "the analytic oracle needs the eigenfunction problem");
        }
        if s.oracle != OracleConfig::None && dim.is_some_and(|d| d != 1) {
            issues.push("sweep.oracle", "oracles are one-dimensional");
        }
    }

    let errs = issues.0.into_inner();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    Ok(RunConfig {
        command: command.unwrap(),
        domain: domain.unwrap(),
        diffusion: diffusion.unwrap(),
        problem,
        grid: grid.unwrap(),
        ensemble: ensemble.unwrap(),
        scheme: scheme.unwrap(),
        bsde: bsde.unwrap(),
        points: points.unwrap(),
        sweep: sweep.unwrap(),
        fd: fd.unwrap(),
        criterion,
        output_dir,
    })
}

/// Dimension implied by a domain section that failed to parse.
fn declared_dim(root: &Table) -> Option<usize> {
    let domain = root.get("domain")?.as_table()?;
    match domain.get("kind")?.as_str()? {
        "interval" => Some(1),
        _ => domain.get("center")?.as_array().map(Vec::len),
    }
}

fn check_dim(s: &Section<'_>, key: &str, v: &Option<Vec<f64>>, dim: Option<usize>) {
    if let (Some(v), Some(d)) = (v, dim) {
        s.check(key, v.len() == d, format!("expected {d} coordinates, found {}", v.len()));
    }
}

fn parse_domain(s: &Section<'_>) -> Option<DomainConfig> {
    if !s.present() {
        s.issues.push(&s.path, "missing required section");
        return None;
    }
    let kind = s.string("kind");
    let out = (|| -> Option<DomainConfig> {
        match kind {
            Some("ball") => {
                let center = s.floats("center");
                let radius = s.float("radius");
                s.check("radius", positive(radius), "must be > 0");
                s.check("center", finite(&center) && center.as_ref().is_none_or(|c| !c.is_empty()), "must be a nonempty list of finite numbers");
                Some(DomainConfig::Ball {
                    center: center?,
                    radius: radius?,
                })
            }
            Some("ellipsoid") => {
                let center = s.floats("center");
                let semi_axes = s.floats("semi_axes");
                s.check("center", finite(&center) && center.as_ref().is_none_or(|c| !c.is_empty()), "must be a nonempty list of finite numbers");
                s.check(
                    "semi_axes",
                    semi_axes.as_ref().is_none_or(|a| a.iter().all(|v| *v > 0.0 && v.is_finite())),
                    "must all be > 0",
                );
                check_dim(s, "semi_axes", &semi_axes, center.as_ref().map(Vec::len));
                Some(DomainConfig::Ellipsoid {
                    center: center?,
                    semi_axes: semi_axes?,
                })
            }
            Some("interval") => {
                let lo = s.float("lo");
                let hi = s.float("hi");
                if let (Some(lo), Some(hi)) = (lo, hi) {
                    s.check("hi", lo < hi && lo.is_finite() && hi.is_finite(), format!("must exceed lo = {lo}"));
                }
                Some(DomainConfig::Interval { lo: lo?, hi: hi? })
            }
            Some(other) => {
                s.issues.push(&s.key_path("kind"), format!("unknown domain '{other}'; expected ball, ellipsoid or interval"));
                None
            }
            None => None,
        }
    })();
    s.finish();
    out
}

fn parse_diffusion(s: &Section<'_>, dim: Option<usize>) -> Option<DiffusionConfig> {
    let kind = if s.present() { s.string("kind") } else { Some("brownian") };
    let out = (|| -> Option<DiffusionConfig> {
        match kind {
            Some("brownian") => {
                let scale = s.opt_float("scale").unwrap_or(1.0);
                s.check("scale", scale >= 0.0 && scale.is_finite(), "must be >= 0");
                Some(DiffusionConfig::Brownian { scale })
            }
            Some("constant-drift") => {
                let drift = s.floats("drift");
                let scale = s.opt_float("scale").unwrap_or(1.0);
                s.check("scale", scale >= 0.0 && scale.is_finite(), "must be >= 0");
                s.check("drift", finite(&drift), "must be finite");
                check_dim(s, "drift", &drift, dim);
                Some(DiffusionConfig::ConstantDrift { drift: drift?, scale })
            }
            Some("custom-table") => {
                let nodes = s.floats("nodes");
                let drift = s.floats("drift");
                let sigma = s.floats("sigma");
                if let Some(n) = &nodes {
                    s.check("nodes", n.len() >= 2 && n.windows(2).all(|w| w[0] < w[1]), "need at least 2 strictly increasing nodes");
                    for (key, v) in [("drift", &drift), ("sigma", &sigma)] {
                        if let Some(v) = v {
                            s.check(key, v.len() == n.len(), format!("expected {} values, one per node", n.len()));
                        }
                    }
                }
                s.check("sigma", sigma.as_ref().is_none_or(|v| v.iter().all(|x| *x >= 0.0 && x.is_finite())), "must be >= 0");
                s.check("drift", finite(&drift), "must be finite");
                Some(DiffusionConfig::Table {
                    nodes: nodes?,
                    drift: drift?,
                    sigma: sigma?,
                })
            }
            Some(other) => {
                s.issues.push(&s.key_path("kind"), format!("unknown diffusion '{other}'; expected brownian, constant-drift or custom-table"));
                None
            }
            None => None,
        }
    })();
    s.finish();
    out
}

fn parse_problem(s: &Section<'_>) -> Option<ProblemConfig> {
    let kind = s.string("kind");
    let finite_key = |key: &str, v: Option<f64>| {
        s.check(key, v.is_none_or(f64::is_finite), "must be finite");
        v
    };
    let pair = |key: &str| -> Option<[f64; 2]> {
        let v = s.opt_floats(key).unwrap_or_else(|| vec![0.0, 0.0]);
        s.check(key, v.len() == 2 && v.iter().all(|x| x.is_finite()), "expected [constant, slope]");
        (v.len() == 2).then(|| [v[0], v[1]])
    };
    let out = (|| -> Option<ProblemConfig> {
        match kind {
            Some("eigenfunction") => {
                let lambda = finite_key("lambda", s.opt_float("lambda")).unwrap_or(0.0);
                let mode = s.opt_int("mode").unwrap_or(1);
                s.check("mode", (1..=10_000).contains(&mode), "must be an integer in [1, 10000]");
                Some(ProblemConfig::Eigenfunction { lambda, mode: mode as u32 })
            }
            Some("robin") => {
                let coefficient = finite_key("coefficient", s.opt_float("coefficient")).unwrap_or(1.0);
                let terminal = finite_key("terminal", s.opt_float("terminal")).unwrap_or(1.0);
                Some(ProblemConfig::Robin { coefficient, terminal })
            }
            Some("constant") => Some(ProblemConfig::Constant {
                driver: finite_key("driver", s.opt_float("driver")).unwrap_or(0.0),
                boundary: finite_key("boundary", s.opt_float("boundary")).unwrap_or(0.0),
                terminal: finite_key("terminal", s.opt_float("terminal")).unwrap_or(0.0),
            }),
            Some("custom-polynomial") => {
                let f = pair("f");
                let h = pair("h");
                let g = s.floats("g");
                s.check("g", g.as_ref().is_none_or(|g| !g.is_empty() && g.iter().all(|x| x.is_finite())), "must be a nonempty list of finite coefficients");
                Some(ProblemConfig::Polynomial { f: f?, h: h?, g: g? })
            }
            Some(other) => {
                s.issues.push(
                    &s.key_path("kind"),
                    format!("unknown problem '{other}'; expected eigenfunction, robin, constant or custom-polynomial"),
                );
                None
            }
            None => None,
        }
    })();
    s.finish();
    out
}

fn count(s: &Section<'_>, key: &str, default: i64, max: i64) -> Option<usize> {
    let v = s.opt_int(key).unwrap_or(default);
    s.check(key, (1..=max).contains(&v), format!("must be an integer in [1, {max}]"));
    (1..=max).contains(&v).then_some(v as usize)
}

fn parse_grid(s: &Section<'_>) -> Option<GridConfig> {
    let start = s.opt_float("start").unwrap_or(0.0);
    let horizon = s.opt_float("horizon").unwrap_or(1.0);
    let steps = count(s, "steps", 100, MAX_STEPS);
    s.check("start", start >= 0.0 && start.is_finite(), "must be >= 0");
    s.check("horizon", horizon > start && horizon.is_finite(), format!("must exceed start = {start}"));
    s.finish();
    Some(GridConfig {
        start,
        horizon,
        steps: steps?,
    })
}

fn parse_ensemble(s: &Section<'_>, dim: Option<usize>) -> Option<EnsembleConfig> {
    let paths = count(s, "paths", 1000, MAX_PATHS);
    let seed = s.opt_int("seed").unwrap_or(0);
    s.check("seed", seed >= 0, "must be >= 0");
    let x0 = s.opt_floats("x0");
    s.check("x0", finite(&x0), "must be finite");
    check_dim(s, "x0", &x0, dim);
    s.finish();
    Some(EnsembleConfig {
        paths: paths?,
        seed: seed.max(0) as u64,
        x0,
    })
}

fn parse_scheme(s: &Section<'_>) -> Option<SchemeConfig> {
    let kind = s.opt_string("kind").unwrap_or("reflected");
    let out = (|| -> Option<SchemeConfig> {
        match kind {
            "reflected" => Some(SchemeConfig::Reflected),
            "penalized" => {
                let n = s.float("n");
                if let Some(n) = n {
                    s.check("n", n > 0.0 && n.is_finite(), format!("must be > 0 (got {n})"));
                }
                let stepping = match s.opt_string("stepping").unwrap_or("semi-implicit") {
                    "semi-implicit" => Some(PenaltyStepping::SemiImplicit),
                    "explicit" => Some(PenaltyStepping::Explicit),
                    other => {
                        s.issues.push(&s.key_path("stepping"), format!("unknown stepping '{other}'; expected semi-implicit or explicit"));
                        None
                    }
                };
                Some(SchemeConfig::Penalized { n: n?, stepping: stepping? })
            }
            other => {
                s.issues.push(&s.key_path("kind"), format!("unknown scheme '{other}'; expected reflected or penalized"));
                None
            }
        }
    })();
    s.finish();
    out
}

fn parse_bsde(s: &Section<'_>) -> Option<BsdeOptions> {
    let degree = s.opt_int("degree").unwrap_or(3);
    s.check("degree", (0..=8).contains(&degree), "must be an integer in [0, 8]");
    let basis = BasisSpec {
        degree: degree.clamp(0, 8) as usize,
        boundary_distance: s.opt_bool("boundary_distance").unwrap_or(true),
        negative_level: s.opt_bool("negative_level").unwrap_or(true),
    };
    let stepping = match s.opt_string("stepping").unwrap_or("explicit") {
        "explicit" => Some(Stepping::Explicit),
        "picard" => {
            let iters = s.opt_int("picard_iterations").unwrap_or(3);
            s.check("picard_iterations", (1..=1000).contains(&iters), "must be an integer in [1, 1000]");
            Some(Stepping::Picard(iters.clamp(1, 1000) as usize))
        }
        other => {
            s.issues.push(&s.key_path("stepping"), format!("unknown stepping '{other}'; expected explicit or picard"));
            None
        }
    };
    s.finish();
    Some(BsdeOptions { basis, stepping: stepping? })
}

fn check_rows(s: &Section<'_>, key: &str, rows: &[Vec<f64>], dim: Option<usize>) {
    for (i, row) in rows.iter().enumerate() {
        let path = format!("{key}[{i}]");
        if let Some(d) = dim {
            s.check(&path, row.len() == d + 1, format!("expected (t, x) with {} numbers, found {}", d + 1, row.len()));
        }
        s.check(&path, !row.is_empty() && row.iter().all(|v| v.is_finite()), "must be finite");
    }
}

fn parse_field(s: &Section<'_>, dim: Option<usize>) -> Option<Vec<Vec<f64>>> {
    let points = s.opt_rows("points").unwrap_or_default();
    check_rows(s, "points", &points, dim);
    s.finish();
    Some(points)
}

fn parse_sweep(s: &Section<'_>, dim: Option<usize>) -> Option<SweepConfig> {
    let d = SweepConfig::default();
    let n = s.opt_floats("n").unwrap_or(d.n);
    for (i, v) in n.iter().enumerate() {
        s.check(&format!("n[{i}]"), *v > 0.0 && v.is_finite(), format!("must be > 0 (got {v})"));
    }
    s.check("n", !n.is_empty() && n.windows(2).all(|w| w[0] < w[1]), "must be a nonempty strictly increasing list");
    let q_raw = s.opt_floats("q").unwrap_or_else(|| vec![1.0, 2.0]);
    s.check("q", !q_raw.is_empty() && q_raw.iter().all(|q| *q == 1.0 || *q == 2.0), "orders must be 1 or 2");
    let min_n = s.opt_float("min_n").unwrap_or(d.min_n);
    let oracle = match s.opt_string("oracle").unwrap_or("none") {
        "none" => Some(OracleConfig::None),
        "analytic" => Some(OracleConfig::Analytic),
        "fd" => Some(OracleConfig::Fd),
        other => {
            s.issues.push(&s.key_path("oracle"), format!("unknown oracle '{other}'; expected none, analytic or fd"));
            None
        }
    };
    let points = s.opt_rows("points").unwrap_or_default();
    check_rows(s, "points", &points, dim);
    let limit = s.opt_floats("limit");
    if let Some(l) = &limit {
        check_rows(s, "limit", std::slice::from_ref(l), dim);
    }
    let sequence = s.opt_rows("sequence").unwrap_or_default();
    check_rows(s, "sequence", &sequence, dim);
    s.finish();
    Some(SweepConfig {
        n,
        q: q_raw.iter().map(|q| *q as u32).collect(),
        min_n,
        points,
        oracle: oracle?,
        limit,
        sequence,
    })
}

fn parse_fd(s: &Section<'_>) -> Option<FdConfig> {
    let cells = count(s, "cells", 400, 1_000_000);
    let steps = count(s, "steps", 400, MAX_STEPS);
    s.finish();
    Some(FdConfig {
        cells: cells?,
        steps: steps?,
    })
}

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn rows(v: &[Vec<f64>]) -> Value {
    Value::Array(v.iter().map(|r| floats(r)).collect())
}

fn table(entries: Vec<(&str, Value)>) -> Value {
    Value::Table(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

fn s(v: &str) -> Value {
    Value::String(v.to_string())
}

impl RunConfig {
    /// Serializes every field, defaults included.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        root.insert("command".into(), s(self.command.name()));
        if let Some(c) = &self.criterion {
            root.insert("criterion".into(), s(c));
        }
        if let Some(o) = &self.output_dir {
            root.insert("output_dir".into(), s(o));
        }
        let domain = match &self.domain {
            DomainConfig::Ball { center, radius } => table(vec![("kind", s("ball")), ("center", floats(center)), ("radius", Value::Float(*radius))]),
            DomainConfig::Ellipsoid { center, semi_axes } => {
                table(vec![("kind", s("ellipsoid")), ("center", floats(center)), ("semi_axes", floats(semi_axes))])
            }
            DomainConfig::Interval { lo, hi } => table(vec![("kind", s("interval")), ("lo", Value::Float(*lo)), ("hi", Value::Float(*hi))]),
        };
        root.insert("domain".into(), domain);
        let diffusion = match &self.diffusion {
            DiffusionConfig::Brownian { scale } => table(vec![("kind", s("brownian")), ("scale", Value::Float(*scale))]),
            DiffusionConfig::ConstantDrift { drift, scale } => {
                table(vec![("kind", s("constant-drift")), ("drift", floats(drift)), ("scale", Value::Float(*scale))])
            }
            DiffusionConfig::Table { nodes, drift, sigma } => table(vec![
                ("kind", s("custom-table")),
                ("nodes", floats(nodes)),
                ("drift", floats(drift)),
                ("sigma", floats(sigma)),
            ]),
        };
        root.insert("diffusion".into(), diffusion);
        if let Some(p) = &self.problem {
            let problem = match p {
                ProblemConfig::Eigenfunction { lambda, mode } => {
                    table(vec![("kind", s("eigenfunction")), ("lambda", Value::Float(*lambda)), ("mode", Value::Integer(*mode as i64))])
                }
                ProblemConfig::Robin { coefficient, terminal } => table(vec![
                    ("kind", s("robin")),
                    ("coefficient", Value::Float(*coefficient)),
                    ("terminal", Value::Float(*terminal)),
                ]),
                ProblemConfig::Constant { driver, boundary, terminal } => table(vec![
                    ("kind", s("constant")),
                    ("driver", Value::Float(*driver)),
                    ("boundary", Value::Float(*boundary)),
                    ("terminal", Value::Float(*terminal)),
                ]),
                ProblemConfig::Polynomial { f, h, g } => table(vec![("kind", s("custom-polynomial")), ("f", floats(f)), ("h", floats(h)), ("g", floats(g))]),
            };
            root.insert("problem".into(), problem);
        }
        root.insert(
            "grid".into(),
            table(vec![
                ("start", Value::Float(self.grid.start)),
                ("horizon", Value::Float(self.grid.horizon)),
                ("steps", Value::Integer(self.grid.steps as i64)),
            ]),
        );
        let mut ensemble = vec![("paths", Value::Integer(self.ensemble.paths as i64)), ("seed", Value::Integer(self.ensemble.seed as i64))];
        if let Some(x0) = &self.ensemble.x0 {
            ensemble.push(("x0", floats(x0)));
        }
        root.insert("ensemble".into(), table(ensemble));
        let scheme = match self.scheme {
            SchemeConfig::Reflected => table(vec![("kind", s("reflected"))]),
            SchemeConfig::Penalized { n, stepping } => table(vec![
                ("kind", s("penalized")),
                ("n", Value::Float(n)),
                (
                    "stepping",
                    s(match stepping {
                        PenaltyStepping::SemiImplicit => "semi-implicit",
                        PenaltyStepping::Explicit => "explicit",
                    }),
                ),
            ]),
        };
        root.insert("scheme".into(), scheme);
        let mut bsde = vec![
            ("degree", Value::Integer(self.bsde.basis.degree as i64)),
            ("boundary_distance", Value::Boolean(self.bsde.basis.boundary_distance)),
            ("negative_level", Value::Boolean(self.bsde.basis.negative_level)),
        ];
        match self.bsde.stepping {
            Stepping::Explicit => bsde.push(("stepping", s("explicit"))),
            Stepping::Picard(k) => {
                bsde.push(("stepping", s("picard")));
                bsde.push(("picard_iterations", Value::Integer(k as i64)));
            }
        }
        root.insert("bsde".into(), table(bsde));
        root.insert("field".into(), table(vec![("points", rows(&self.points))]));
        let sw = &self.sweep;
        let mut sweep = vec![
            ("n", floats(&sw.n)),
            ("q", Value::Array(sw.q.iter().map(|q| Value::Integer(*q as i64)).collect())),
            ("min_n", Value::Float(sw.min_n)),
            ("points", rows(&sw.points)),
            (
                "oracle",
                s(match sw.oracle {
                    OracleConfig::None => "none",
                    OracleConfig::Analytic => "analytic",
                    OracleConfig::Fd => "fd",
                }),
            ),
            ("sequence", rows(&sw.sequence)),
        ];
        if let Some(l) = &sw.limit {
            sweep.push(("limit", floats(l)));
        }
        root.insert("sweep".into(), table(sweep));
        root.insert(
            "fd".into(),
            table(vec![("cells", Value::Integer(self.fd.cells as i64)), ("steps", Value::Integer(self.fd.steps as i64))]),
        );
        toml::to_string(&root).expect("toml tables always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
command = "evaluate-field"

[domain]
kind = "ball"
center = [0.0, 0.0]
radius = 1.0

[problem]
kind = "eigenfunction"
lambda = 0.3

[field]
points = [[0.0, 0.1, 0.2]]
"#;

    fn issues(text: &str) -> Vec<(String, String)> {
        match parse_config(text) {
            Err(Error::Config(e)) => e.issues().iter().map(|i| (i.path.clone(), i.message.clone())).collect(),
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.command, Command::EvaluateField);
        assert_eq!(c.diffusion, DiffusionConfig::Brownian { scale: 1.0 });
        assert_eq!(c.grid, GridConfig { start: 0.0, horizon: 1.0, steps: 100 });
        assert_eq!(c.ensemble.paths, 1000);
        assert_eq!(c.scheme, SchemeConfig::Reflected);
        assert_eq!(c.bsde, BsdeOptions::default());
        assert_eq!(c.problem, Some(ProblemConfig::Eigenfunction { lambda: 0.3, mode: 1 }));
        assert_eq!(c.x0(), vec![0.0, 0.0]);
        assert_eq!(c.sweep.n, vec![4.0, 16.0, 64.0, 256.0]);
    }

    #[test]
    fn negative_penalization_names_the_key() {
        let text = format!("{MINIMAL}\n[scheme]\nkind = \"penalized\"\nn = -1\n");
        let errs = issues(&text);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].0, "scheme.n");
        assert!(errs[0].1.contains("> 0"), "{}", errs[0].1);
    }

    #[test]
    fn all_problems_are_collected() {
        let text = r#"
command = "simulate"
colour = "blue"

[domain]
kind = "ball"
center = [0.0, 0.0]

[grid]
steps = 0
horizon = "one"

[ensemble]
paths = 20000000
x0 = [0.0]
"#;
        let errs = issues(text);
        let paths: Vec<&str> = errs.iter().map(|e| e.0.as_str()).collect();
        for expected in ["command", "colour", "domain.radius", "grid.steps", "grid.horizon", "ensemble.paths", "ensemble.x0"] {
            assert!(paths.contains(&expected), "missing {expected} in {errs:?}");
        }
        assert!(errs.iter().any(|e| e.0 == "colour" && e.1 == "unknown key"));
        assert!(errs.iter().any(|e| e.0 == "domain.radius" && e.1 == "missing required key"));
    }

    #[test]
    fn missing_problem_is_reported_for_field_commands() {
        let text = "command = \"solve-bsde\"\n[domain]\nkind = \"interval\"\nlo = -1\nhi = 1\n";
        assert_eq!(issues(text), vec![("problem".to_string(), "missing required section for this command".to_string())]);
        let ok = "command = \"simulate-forward\"\n[domain]\nkind = \"interval\"\nlo = -1\nhi = 1\n";
        assert!(parse_config(ok).unwrap().problem.is_none());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let full = r#"
command = "study-field-convergence"
criterion = "c9"
output_dir = "out"

[domain]
kind = "ellipsoid"
center = [0.5, -1.0]
semi_axes = [2.0, 0.75]

[diffusion]
kind = "custom-table"
nodes = [-1.0, 0.0, 1.0]
drift = [0.1, 0.0, -0.1]
sigma = [1.0, 0.5, 1.0]

[problem]
kind = "custom-polynomial"
f = [0.1, -0.5]
h = [0.0, 1.0]
g = [1.0, 0.0, -0.3]

[scheme]
kind = "penalized"
n = 64
stepping = "explicit"

[bsde]
degree = 2
stepping = "picard"
picard_iterations = 4

[ensemble]
x0 = [0.1, -0.9]
seed = 99

[sweep]
n = [4, 16]
points = [[0.0, 0.5, -1.0], [0.25, 1.0, -1.0]]
"#;
        for text in [MINIMAL, full] {
            let a = parse_config(text).unwrap();
            let b = parse_config(&a.to_toml()).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.to_toml(), b.to_toml());
        }
    }

    #[test]
    fn reflected_start_must_be_inside() {
        let text = format!("{MINIMAL}\n[ensemble]\nx0 = [2.0, 0.0]\n");
        assert_eq!(issues(&text)[0].0, "ensemble.x0");
        let pen = format!("{MINIMAL}\n[ensemble]\nx0 = [2.0, 0.0]\n[scheme]\nkind = \"penalized\"\nn = 4\n");
        assert!(parse_config(&pen).is_ok());
    }

    #[test]
    fn command_override() {
        let text = MINIMAL.replace("command = \"evaluate-field\"", "");
        assert!(parse_config(&text).is_err());
        let c = parse_config_with(&text, Some(Command::SolveBsde)).unwrap();
        assert_eq!(c.command, Command::SolveBsde);
    }

    #[test]
    fn syntax_errors_are_config_errors() {
        assert!(matches!(parse_config("command = "), Err(Error::Config(_))));
    }
}
