//! Least-squares projection onto a finite function basis, used to estimate
//! conditional expectations along simulated paths.
//!
//! The design matrix is orthonormalised column by column with modified
//! Gram-Schmidt (two passes). Columns that are numerically in the span of
//! the earlier ones are dropped, so collinear features (for instance the
//! level function of a ball, which is itself quadratic) cost nothing and
//! never make the solve ill-conditioned. All reductions run over fixed-size
//! chunks combined in index order, so results do not depend on the number
//! of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ConvexDomain;

const CHUNK: usize = 4096;
/// Relative norm below which an orthogonalised column is dropped.
const DROP_TOL: f64 = 1e-9;

/// Regression features: monomials up to a total degree, optionally
/// augmented with the distance to the boundary and `max(0, -l(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisSpec {
    pub degree: usize,
    pub boundary_distance: bool,
    pub negative_level: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            degree: 3,
            boundary_distance: true,
            negative_level: true,
        }
    }
}

/// A `BasisSpec` instantiated for a domain.
#[derive(Debug, Clone)]
pub struct Basis {
    spec: BasisSpec,
    exponents: Vec<Vec<u32>>,
}

impl Basis {
    pub fn new(spec: BasisSpec, dim: usize) -> Self {
        let mut exponents = Vec::new();
        let mut current = vec![0u32; dim];
        for total in 0..=spec.degree as u32 {
            push_monomials(&mut exponents, &mut current, 0, total);
        }
        Self { spec, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len() + self.spec.boundary_distance as usize + self.spec.negative_level as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature values at `x`; the first entry is the constant 1.
    pub fn eval_into(&self, domain: &ConvexDomain, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = x.iter().zip(e).map(|(xi, &p)| xi.powi(p as i32)).product();
        }
        let mut j = self.exponents.len();
        if self.spec.boundary_distance {
            out[j] = domain.boundary_distance(x);
            j += 1;
        }
        if self.spec.negative_level {
            out[j] = (-domain.level(x)).max(0.0);
        }
    }

    /// Column-major design matrix for `points` (flattened, `dim` per point).
    pub fn design(&self, domain: &ConvexDomain, points: &[f64], dim: usize) -> Vec<Vec<f64>> {
        let m = points.len() / dim;
        let p = self.len();
        let mut rows = vec![0.0; m * p];
        rows.par_chunks_mut(p)
            .zip(points.par_chunks(dim))
            .for_each(|(row, x)| self.eval_into(domain, x, row));
        let mut cols = vec![vec![0.0; m]; p];
        for (i, row) in rows.chunks(p).enumerate() {
            for (c, v) in cols.iter_mut().zip(row) {
                c[i] = *v;
            }
        }
        cols
    }
}

fn push_monomials(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, var: usize, remaining: u32) {
    if var + 1 == current.len() {
        current[var] = remaining;
        out.push(current.clone());
        current[var] = 0;
        return;
    }
    for p in (0..=remaining).rev() {
        current[var] = p;
        push_monomials(out, current, var + 1, remaining - p);
    }
    current[var] = 0;
}

pub(crate) fn par_dot(a: &[f64], b: &[f64]) -> f64 {
    a.par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>())
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

fn par_axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.par_chunks_mut(CHUNK).zip(x.par_chunks(CHUNK)).for_each(|(yc, xc)| {
        for (a, b) in yc.iter_mut().zip(xc) {
            *a += alpha * b;
        }
    });
}

/// Orthogonal projector onto the span of a design matrix.
#[derive(Debug, Clone)]
pub struct Projector {
    q: Vec<Vec<f64>>,
    retained: Vec<usize>,
    columns: usize,
}

impl Projector {
    /// Orthonormalises `columns`. `step` only labels errors.
    pub fn fit(columns: Vec<Vec<f64>>, step: usize) -> Result<Self> {
        let Some(m) = columns.first().map(Vec::len) else {
            return Err(Error::DegenerateBasis {
                step,
                reason: "basis has no functions".into(),
            });
        };
        if m == 0 {
            return Err(Error::DegenerateBasis {
                step,
                reason: "no sample paths".into(),
            });
        }
        let total = columns.len();
        let mut q: Vec<Vec<f64>> = Vec::new();
        let mut retained = Vec::new();
        for (j, mut v) in columns.into_iter().enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::DegenerateBasis {
                    step,
                    reason: format!("basis function {j} is not finite on the sample"),
                });
            }
            let original = par_dot(&v, &v).sqrt();
            if original == 0.0 {
                continue;
            }
            for _ in 0..2 {
                for qi in &q {
                    let c = par_dot(qi, &v);
                    par_axpy(&mut v, -c, qi);
                }
            }
            let rest = par_dot(&v, &v).sqrt();
            if rest <= DROP_TOL * original {
                continue;
            }
            let inv = 1.0 / rest;
            v.par_iter_mut().for_each(|x| *x *= inv);
            q.push(v);
            retained.push(j);
        }
        if q.is_empty() {
            return Err(Error::DegenerateBasis {
                step,
                reason: "every basis function vanishes on the sample".into(),
            });
        }
        Ok(Self {
            q,
            retained,
            columns: total,
        })
    }

    pub fn rank(&self) -> usize {
        self.q.len()
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn basis_size(&self) -> usize {
        self.columns
    }

    /// Fitted values of `y` (the least-squares conditional expectation).
    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        let mut fitted = vec![0.0; y.len()];
        for qi in &self.q {
            let c = par_dot(qi, y);
            par_axpy(&mut fitted, c, qi);
        }
        fitted
    }
}

/// `max_j |(1/M) sum_p phi_j(X_p) r_p|` over the basis columns.
pub fn orthogonality_residual(columns: &[Vec<f64>], residual: &[f64]) -> f64 {
    let m = residual.len() as f64;
    columns
        .iter()
        .map(|c| (par_dot(c, residual) / m).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_count() {
        let spec = BasisSpec {
            degree: 3,
            boundary_distance: false,
            negative_level: false,
        };
        assert_eq!(Basis::new(spec, 1).len(), 4);
        assert_eq!(Basis::new(spec, 2).len(), 10);
        assert_eq!(Basis::new(spec, 3).len(), 20);
        assert_eq!(Basis::new(BasisSpec::default(), 2).len(), 12);
    }

    #[test]
    fn constant_comes_first() {
        let dom = ConvexDomain::interval(-1.0, 1.0).unwrap();
        let basis = Basis::new(BasisSpec::default(), 1);
        let mut row = vec![0.0; basis.len()];
        basis.eval_into(&dom, &[0.5], &mut row);
        assert_eq!(row, vec![1.0, 0.5, 0.25, 0.125, 0.5, 0.375]);
    }

    #[test]
    fn projection_reproduces_span_and_is_orthogonal() {
        let dom = ConvexDomain::interval(-1.0, 1.0).unwrap();
        let basis = Basis::new(BasisSpec::default(), 1);
        let xs: Vec<f64> = (0..500).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / 500.0).collect();
        let cols = basis.design(&dom, &xs, 1);
        let proj = Projector::fit(cols.clone(), 0).unwrap();
        // the ball level feature is quadratic, so it is dropped
        assert_eq!(proj.rank(), 5);
        let y: Vec<f64> = xs.iter().map(|x| 2.0 - x + 3.0 * x * x * x).collect();
        let fit = proj.project(&y);
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        let z: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin() + x.abs().sqrt()).collect();
        let fz = proj.project(&z);
        let r: Vec<f64> = z.iter().zip(&fz).map(|(a, b)| a - b).collect();
        assert!(orthogonality_residual(&cols, &r) < 1e-13);
    }

    #[test]
    fn degenerate_cloud_collapses_to_the_mean() {
        let dom = ConvexDomain::ball(vec![0.0, 0.0], 1.0).unwrap();
        let basis = Basis::new(BasisSpec::default(), 2);
        let xs: Vec<f64> = std::iter::repeat([0.3, -0.1]).take(100).flatten().collect();
        let proj = Projector::fit(basis.design(&dom, &xs, 2), 4).unwrap();
        assert_eq!(proj.rank(), 1);
        let y: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let fit = proj.project(&y);
        assert!(fit.iter().all(|v| (v - 49.5).abs() < 1e-12));
    }

    #[test]
    fn non_finite_features_name_the_step() {
        let err = Projector::fit(vec![vec![1.0, f64::NAN]], 17).unwrap_err();
        match err {
            Error::DegenerateBasis { step, .. } => assert_eq!(step, 17),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Projector::fit(vec![vec![0.0; 4]], 2), Err(Error::DegenerateBasis { step: 2, .. })));
    }
}
