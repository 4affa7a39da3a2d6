//! Desk-scale acceptance suite. Runs every criterion at its stated tolerance
//! and prints one PASS/FAIL line each; exits nonzero if any fails.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use penreflect::bsde::martingale_residual_report;
use penreflect::cli::run;
use penreflect::config::parse_config;
use penreflect::experiments::{
    study_field_convergence, study_forward_convergence, study_initial_continuity, study_moment_uniformity, ContinuityStudy, FieldOracle, FieldStudy,
    ForwardStudy, MomentStudy, StudyReport,
};
use penreflect::forward::{pathwise_penalized_bound, terminal_states};
use penreflect::oracle::ks_distance;
use penreflect::regression::BasisSpec;
use penreflect::{
    solve_bsde, BsdeOptions, ConvexDomain, DiffusionSpec, EnsembleSetup, FieldScheme, FieldSolver, NeumannProblem, PathEnsemble, PenaltyStepping, Problem, Scheme,
    TimeGrid,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn from_report(report: &StudyReport, keep: impl Fn(&str) -> bool) -> Outcome {
    let picked: Vec<_> = report.verdicts.iter().filter(|v| keep(&v.check)).collect();
    let failed: Vec<String> = picked.iter().filter(|v| !v.passed).map(|v| format!("{} ({})", v.check, v.detail)).collect();
    if picked.is_empty() {
        return outcome(false, "no verdicts produced");
    }
    if failed.is_empty() {
        outcome(true, format!("{} checks passed", picked.len()))
    } else {
        outcome(false, failed.join("; "))
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projection onto an axis-aligned ellipsoid by bisection on the Lagrange
/// multiplier of `sum ((x_i - c_i) / a_i)^2 = 1`.
fn ellipsoid_projection(c: &[f64], a: &[f64], x: &[f64]) -> Vec<f64> {
    let y: Vec<f64> = x.iter().zip(c).map(|(x, c)| x - c).collect();
    let q = |mu: f64| y.iter().zip(a).map(|(y, a)| (a * y / (a * a + mu)).powi(2)).sum::<f64>();
    if q(0.0) <= 1.0 {
        return x.to_vec();
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while q(hi) > 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if q(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    y.iter().zip(a).zip(c).map(|((y, a), c)| c + a * a * y / (a * a + mu)).collect()
}

fn geometry_suite() -> Outcome {
    let cases: Vec<(&str, ConvexDomain, Box<dyn Fn(&[f64]) -> Vec<f64>>)> = vec![
        ("interval", ConvexDomain::interval(-1.0, 1.0).unwrap(), Box::new(|x: &[f64]| vec![x[0].clamp(-1.0, 1.0)])),
        ("ball2", ConvexDomain::ball(vec![0.3, -0.2], 1.5).unwrap(), {
            Box::new(|x: &[f64]| {
                let c = [0.3, -0.2];
                let r = euclid(x, &c);
                if r <= 1.5 { x.to_vec() } else { x.iter().zip(&c).map(|(x, c)| c + 1.5 * (x - c) / r).collect() }
            })
        }),
        ("ball3", ConvexDomain::ball(vec![0.0; 3], 1.0).unwrap(), Box::new(|x: &[f64]| {
            let r = euclid(x, &[0.0; 3]);
            if r <= 1.0 { x.to_vec() } else { x.iter().map(|v| v / r).collect() }
        })),
        ("ellipsoid2", ConvexDomain::ellipsoid(vec![0.0, 0.5], vec![2.0, 0.7]).unwrap(), Box::new(|x: &[f64]| {
            ellipsoid_projection(&[0.0, 0.5], &[2.0, 0.7], x)
        })),
        ("ellipsoid3", ConvexDomain::ellipsoid(vec![0.1, 0.0, -0.1], vec![1.0, 0.5, 2.5]).unwrap(), Box::new(|x: &[f64]| {
            ellipsoid_projection(&[0.1, 0.0, -0.1], &[1.0, 0.5, 2.5], x)
        })),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut sub, mut dist, mut resolv) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for (_, domain, project) in &cases {
        let d = domain.dim();
        let mut n = 0;
        while n < 10_000 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            if !domain.contains(&z) {
                continue;
            }
            n += 1;
            let delta = domain.penalization(&x).unwrap();
            let zx: Vec<f64> = z.iter().zip(&x).map(|(a, b)| a - b).collect();
            sub = sub.max(dot(&zx, &delta));
            let reference = project(&x);
            let true_dist = euclid(&x, &reference);
            dist = dist.max((euclid(&delta, &vec![0.0; d]) - 2.0 * true_dist).abs());
            let lambda = rng.random_range(1e-3..1e3);
            let r = domain.resolvent(&x, lambda).unwrap();
            let dr = domain.penalization(&r).unwrap();
            let res: Vec<f64> = r.iter().zip(&dr).zip(&x).map(|((r, d), v)| r + lambda * d - v).collect();
            resolv = resolv.max(euclid(&res, &vec![0.0; d]) / (1.0 + euclid(&x, &vec![0.0; d])));
        }
    }
    outcome(
        sub <= 1e-12 && dist <= 1e-9 && resolv <= 1e-10,
        format!("max <z-x, delta> = {sub:.2e}, max ||delta| - 2 dist| = {dist:.2e}, max resolvent residual = {resolv:.2e}"),
    )
}

fn containment() -> Outcome {
    let domain = ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let spec = DiffusionSpec::brownian(2, 1.0);
    let x0 = [0.5, 0.0];
    let setup = EnsembleSetup {
        spec: &spec,
        domain: &domain,
        scheme: Scheme::Reflected,
        grid: TimeGrid::new(0.0, 1.0, 1000).unwrap(),
        x0: &x0,
        seed: 2,
        paths: 1000,
    };
    let ens = PathEnsemble::simulate(&setup).unwrap();
    let (mut worst_level, mut monotone, mut inside_ok, mut inside_steps) = (f64::NEG_INFINITY, true, true, 0usize);
    for p in &ens.paths {
        for i in 0..p.nodes() {
            worst_level = worst_level.max(domain.level(p.state(i)));
        }
        for i in 0..p.grid.steps() {
            monotone &= p.k[i + 1] >= p.k[i];
            let pre: Vec<f64> = (0..2).map(|c| p.state(i)[c] + p.brownian(i + 1)[c] - p.brownian(i)[c]).collect();
            if domain.contains(&pre) {
                inside_steps += 1;
                // K = V - X is stored, so an unpushed step leaves it equal up to roundoff
                let dk_push = euclid(p.reflection(i + 1), p.reflection(i));
                inside_ok &= p.boundary_increment(i) == 0.0 && dk_push <= 1e-14;
            }
        }
    }
    outcome(
        worst_level <= 1e-12 && monotone && inside_ok,
        format!("max level {worst_level:.2e}; k nondecreasing: {monotone}; zero push on {inside_steps} interior steps: {inside_ok}"),
    )
}

/// Cosine-series distribution function of reflected standard Brownian
/// motion on `[-1, 1]` from `x0` at time `t`.
fn cosine_series_cdf(x0: f64, t: f64, y: f64) -> f64 {
    let y = y.clamp(-1.0, 1.0);
    let mut s = (y + 1.0) / 2.0;
    for k in 1..400 {
        let a = k as f64 * PI / 2.0;
        s += (a * (x0 + 1.0)).cos() * (a * (y + 1.0)).sin() / a * (-a * a * t / 2.0).exp();
    }
    s
}

fn reflected_law() -> Outcome {
    let domain = ConvexDomain::interval(-1.0, 1.0).unwrap();
    let spec = DiffusionSpec::brownian(1, 1.0);
    let setup = EnsembleSetup {
        spec: &spec,
        domain: &domain,
        scheme: Scheme::Reflected,
        grid: TimeGrid::new(0.0, 1.0, 1000).unwrap(),
        x0: &[0.0],
        seed: 3,
        paths: 100_000,
    };
    let xt: Vec<f64> = terminal_states(&setup).unwrap().into_iter().map(|x| x[0]).collect();
    let ks = ks_distance(&xt, |y| cosine_series_cdf(0.0, 1.0, y));
    outcome(ks <= 0.02, format!("KS = {ks:.4e} <= 0.02"))
}

fn forward_convergence() -> Outcome {
    let domain = ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let spec = DiffusionSpec::brownian(2, 1.0);
    let x0 = [0.0, 0.0];
    let study = ForwardStudy {
        setup: EnsembleSetup {
            spec: &spec,
            domain: &domain,
            scheme: Scheme::Reflected,
            grid: TimeGrid::new(0.0, 1.0, 1000).unwrap(),
            x0: &x0,
            seed: 4,
            paths: 1000,
        },
        n_values: vec![4.0, 16.0, 64.0, 256.0],
        stepping: PenaltyStepping::SemiImplicit,
        criterion: "forward-convergence".into(),
    };
    from_report(&study_forward_convergence(&study).unwrap(), |_| true)
}

fn random_free_term(rng: &mut ChaCha8Rng, nodes: usize) -> Vec<Vec<f64>> {
    let knots = rng.random_range(2..12usize);
    let pts: Vec<[f64; 2]> = (0..=knots).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
    (0..nodes)
        .map(|i| {
            let s = i as f64 / (nodes - 1) as f64 * knots as f64;
            let j = (s.floor() as usize).min(knots - 1);
            let w = s - j as f64;
            vec![pts[j][0] * (1.0 - w) + pts[j + 1][0] * w, pts[j][1] * (1.0 - w) + pts[j + 1][1] * w]
        })
        .collect()
}

fn pathwise_inequality() -> Outcome {
    let domain = ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 500).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let a = random_free_term(&mut rng, grid.steps() + 1);
        let b = random_free_term(&mut rng, grid.steps() + 1);
        for n in [16.0, 256.0] {
            let bound = pathwise_penalized_bound(&domain, n, grid.dt(), &a, &b).unwrap();
            worst = worst.min(bound.slack());
        }
    }
    outcome(worst >= -1e-8, format!("min slack {worst:.4e} >= -1e-8 over 200 cases"))
}

fn moment_uniformity() -> Outcome {
    let domain = ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let spec = DiffusionSpec::brownian(2, 1.0);
    let x0 = [0.0, 0.0];
    let study = MomentStudy {
        setup: EnsembleSetup {
            spec: &spec,
            domain: &domain,
            scheme: Scheme::Reflected,
            grid: TimeGrid::new(0.0, 1.0, 1000).unwrap(),
            x0: &x0,
            seed: 6,
            paths: 10_000,
        },
        n_values: vec![16.0, 64.0, 256.0, 1024.0],
        q_values: vec![1, 2],
        stepping: PenaltyStepping::SemiImplicit,
        min_n: 16.0,
        criterion: "moment-uniformity".into(),
    };
    from_report(&study_moment_uniformity(&study).unwrap(), |_| true)
}

fn linear_field_oracle() -> Outcome {
    let domain = ConvexDomain::interval(-1.0, 1.0).unwrap();
    let spec = DiffusionSpec::brownian(1, 1.0);
    let problem = Problem::Eigenfunction { lambda: 0.3, mode: 1 };
    let solver = FieldSolver {
        spec: &spec,
        domain: &domain,
        problem: &problem,
        options: BsdeOptions::default(),
        horizon: 1.0,
    };
    let e = solver.evaluate(0.0, &[-0.5], FieldScheme::Reflected, 200_000, 400, 7).unwrap();
    let exact = (-(0.3 + PI * PI / 8.0)).exp() * (PI / 4.0).cos();
    let (u, se) = (e.value[0], e.stderr[0]);
    let err = (u - exact).abs();
    outcome(
        err <= 3.0 * se && se <= 0.01,
        format!("u = {u:.5} vs {exact:.5}: |diff| = {err:.2e} <= 3 * {se:.2e}; stderr <= 0.01"),
    )
}

fn robin_study() -> StudyReport {
    let domain = ConvexDomain::interval(-1.0, 1.0).unwrap();
    let spec = DiffusionSpec::brownian(1, 1.0);
    let problem = Problem::Robin { coefficient: 1.0, terminal: 1.0 };
    let study = FieldStudy {
        solver: FieldSolver {
            spec: &spec,
            domain: &domain,
            problem: &problem,
            options: BsdeOptions::default(),
            horizon: 1.0,
        },
        points: [-0.8, -0.4, 0.0, 0.4, 0.8].iter().map(|x| (0.0, vec![*x])).collect(),
        n_values: vec![4.0, 16.0, 64.0, 256.0],
        paths: 10_000,
        steps: 400,
        seed: 8,
        oracle: FieldOracle::FiniteDifference { cells: 800, steps: 800 },
        criterion: "robin".into(),
    };
    study_field_convergence(&study).unwrap()
}

fn bsde_structure() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let interval = ConvexDomain::interval(-1.0, 1.0).unwrap();
    let disk = ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
    let s1 = DiffusionSpec::brownian(1, 1.0);
    let s2 = DiffusionSpec::brownian(2, 1.0);
    let cases: Vec<(&ConvexDomain, &DiffusionSpec, Vec<f64>, Problem)> = vec![
        (&interval, &s1, vec![0.2], Problem::Eigenfunction { lambda: 0.3, mode: 1 }),
        (&interval, &s1, vec![0.2], Problem::Robin { coefficient: 1.0, terminal: 1.0 }),
        (&disk, &s2, vec![0.3, -0.4], Problem::Robin { coefficient: 1.0, terminal: 1.0 }),
    ];
    for (domain, spec, x0, problem) in &cases {
        let setup = EnsembleSetup {
            spec: *spec,
            domain,
            scheme: Scheme::Reflected,
            grid: TimeGrid::new(0.0, 1.0, 200).unwrap(),
            x0,
            seed: 10,
            paths: 4000,
        };
        let ens = PathEnsemble::simulate(&setup).unwrap();
        let sol = solve_bsde(&ens, domain, problem, BsdeOptions::default()).unwrap();
        let n = ens.grid.steps();
        let mut g = vec![0.0; problem.k_dim()];
        let mut exact = true;
        for (p, path) in ens.paths.iter().enumerate() {
            problem.terminal(path.terminal(), &mut g);
            exact &= sol.value(n, p) == g.as_slice();
        }
        let report = martingale_residual_report(&sol, &ens, domain, BasisSpec::default(), 1e-8).unwrap();
        let orth = report.orthogonality.iter().cloned().fold(0.0, f64::max);
        ok &= exact && orth <= 1e-8;
        notes.push(format!("terminal exact {exact}, orthogonality {orth:.1e}"));
    }
    for (domain, spec, x0) in [(&interval, &s1, vec![0.1]), (&disk, &s2, vec![0.5, 0.5])] {
        let setup = EnsembleSetup {
            spec,
            domain,
            scheme: Scheme::Reflected,
            grid: TimeGrid::new(0.25, 1.0, 150).unwrap(),
            x0: &x0,
            seed: 11,
            paths: 2000,
        };
        let ens = PathEnsemble::simulate(&setup).unwrap();
        let problem = Problem::Constant { driver: 1.0, boundary: 0.0, terminal: 0.0 };
        let sol = solve_bsde(&ens, domain, &problem, BsdeOptions::default()).unwrap();
        let err = sol.initial.iter().map(|y| (y - 0.75).abs()).fold(0.0, f64::max);
        ok &= err <= 1e-10;
        notes.push(format!("f = 1 error {err:.1e}"));
    }
    outcome(ok, notes.join("; "))
}

const FORWARD_TOML: &str = r#"
command = "study-forward-convergence"

[domain]
kind = "ball"
center = [0.0, 0.0]
radius = 1.0

[grid]
steps = 1000

[ensemble]
paths = 1000
seed = 4

[sweep]
n = [4.0, 16.0, 64.0, 256.0]
"#;

const BSDE_TOML: &str = r#"
command = "solve-bsde"

[domain]
kind = "interval"
lo = -1.0
hi = 1.0

[problem]
kind = "robin"
coefficient = 1.0
terminal = 1.0

[grid]
steps = 200

[ensemble]
paths = 4000
seed = 10
x0 = [0.2]
"#;

const FIELD_TOML: &str = r#"
command = "study-field-convergence"

[domain]
kind = "interval"
lo = -1.0
hi = 1.0

[problem]
kind = "robin"

[grid]
steps = 100

[ensemble]
paths = 2000
seed = 8

[sweep]
n = [4.0, 16.0, 64.0]
points = [[0.0, -0.8], [0.0, 0.4]]
oracle = "fd"

[fd]
cells = 200
steps = 200
"#;

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for text in [FORWARD_TOML, BSDE_TOML, FIELD_TOML] {
        let config = parse_config(text).unwrap();
        let mut runs = Vec::new();
        for workers in [1, 4] {
            let dir = tempfile::tempdir().unwrap();
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
            pool.install(|| run(&config, dir.path())).unwrap();
            runs.push(csv_files(dir.path()));
        }
        let same = !runs[0].is_empty() && runs[0] == runs[1];
        ok &= same;
        let names: Vec<_> = runs[0].iter().map(|f| f.0.as_str()).collect();
        notes.push(format!("{}: {:?} identical {same}", config.command.name(), names));
    }
    outcome(ok, notes.join("; "))
}

fn initial_continuity() -> Outcome {
    let domain = ConvexDomain::interval(-1.0, 1.0).unwrap();
    let spec = DiffusionSpec::brownian(1, 1.0);
    let problem = Problem::Eigenfunction { lambda: 0.3, mode: 1 };
    let study = ContinuityStudy {
        solver: FieldSolver {
            spec: &spec,
            domain: &domain,
            problem: &problem,
            options: BsdeOptions::default(),
            horizon: 1.0,
        },
        limit: (0.0, vec![-0.5]),
        sequence: (4..=6).map(|j| (0.5f64.powi(j), vec![-0.5 + 0.5f64.powi(j)])).collect(),
        scheme: FieldScheme::Reflected,
        paths: 100_000,
        steps: 400,
        seed: 12,
        oracle: Some((0.3, 1)),
        criterion: "continuity".into(),
    };
    from_report(&study_initial_continuity(&study).unwrap(), |_| true)
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut robin: Option<StudyReport> = None;
    let mut robin_time = Duration::ZERO;
    let criteria: [(&str, u64); 12] = [
        ("geometry", 5),
        ("containment", 10),
        ("reflected-law", 120),
        ("forward-convergence", 180),
        ("pathwise-inequality", 10),
        ("moment-uniformity", 120),
        ("linear-field-oracle", 120),
        ("robin-boundary-oracle", 180),
        ("field-convergence", 300),
        ("bsde-structure", 30),
        ("reproducibility", 600),
        ("initial-continuity", 180),
    ];
    for (idx, (name, budget)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let mut out = match idx {
            0 => geometry_suite(),
            1 => containment(),
            2 => reflected_law(),
            3 => forward_convergence(),
            4 => pathwise_inequality(),
            5 => moment_uniformity(),
            6 => linear_field_oracle(),
            7 | 8 => {
                // one sweep serves both: the reflected column against finite
                // differences, and the penalized gaps
                if robin.is_none() {
                    let c = Instant::now();
                    robin = Some(robin_study());
                    robin_time = c.elapsed();
                }
                let report = robin.as_ref().unwrap();
                if idx == 7 {
                    from_report(report, |c| c.starts_with("oracle"))
                } else {
                    from_report(report, |c| !c.starts_with("oracle"))
                }
            }
            9 => bsde_structure(),
            10 => reproducibility(),
            _ => initial_continuity(),
        };
        let mut elapsed = clock.elapsed();
        if idx == 7 || idx == 8 {
            elapsed = robin_time;
        }
        if elapsed.as_secs_f64() > *budget as f64 {
            out.passed = false;
            out.detail.push_str(&format!("; runtime over {budget} s"));
        }
        if !out.passed {
            failed += 1;
        }
        println!(
            "{} [{:02}] {name}: {} ({:.1} s)",
            if out.passed { "PASS" } else { "FAIL" },
            idx + 1,
            out.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of 12 criteria passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
