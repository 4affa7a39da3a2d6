//! Bounded convex domains described by a level function.
//!
//! A domain `G` is the strict sublevel set `{l < 0}` of a smooth level
//! function `l` whose gradient is the unit outward normal on `{l = 0}`.
//! Projection onto the closure, the distance to it, the penalization term
//! `delta(x) = 2 (x - proj(x))` and the resolvent of `delta` do not depend
//! on the choice of `l`; only the outward normal and the boundary measure
//! of the forward processes do.
//!
//! Points on the boundary count as inside: `delta = 0` and `proj(x) = x`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Convergence tolerance of the 1-D secular equation used by the ellipsoid
/// projection.
const SECULAR_TOL: f64 = 1e-12;
const SECULAR_MAX_ITER: usize = 100;

/// A closed convex set with a level-function description.
///
/// Implement this to plug a custom domain into the simulators.
pub trait ConvexSet: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// Level function value; negative inside, zero on the boundary.
    fn level(&self, x: &[f64]) -> f64;
    fn level_gradient(&self, x: &[f64], out: &mut [f64]);
    /// Membership in the closed set.
    fn contains(&self, x: &[f64]) -> bool;
    /// Euclidean projection onto the closed set.
    fn project(&self, x: &[f64], out: &mut [f64]);
    /// Distance to the boundary, for points on either side.
    fn boundary_distance(&self, x: &[f64]) -> f64;
}

/// Euclidean ball `|x - c| < R`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    center: Vec<f64>,
    radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::invalid("ball dimension must be at least 1"));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::invalid(format!("ball radius must be positive, got {radius}")));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("ball center must be finite"));
        }
        Ok(Self { center, radius })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn sq_offset(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.center).map(|(xi, ci)| (xi - ci) * (xi - ci)).sum()
    }

    /// Derivative of the level function with respect to `s = |x - c|^2`.
    fn level_slope(&self, s: f64) -> f64 {
        let r = self.radius;
        let tau = (s - 4.0 * r * r) / (5.0 * r * r);
        if tau <= 0.0 {
            1.0 / (2.0 * r)
        } else if tau >= 1.0 {
            0.0
        } else {
            (1.0 - 3.0 * tau * tau + 2.0 * tau * tau * tau) / (2.0 * r)
        }
    }
}

impl ConvexSet for Ball {
    fn dim(&self) -> usize {
        self.center.len()
    }

    // (s - R^2) / 2R up to |x - c| = 2R, then a C^2 blend into the constant 11R/4
    // reached at |x - c| = 3R.
    fn level(&self, x: &[f64]) -> f64 {
        let r = self.radius;
        let s = self.sq_offset(x);
        let tau = (s - 4.0 * r * r) / (5.0 * r * r);
        if tau <= 0.0 {
            (s - r * r) / (2.0 * r)
        } else if tau >= 1.0 {
            2.75 * r
        } else {
            1.5 * r + 2.5 * r * (tau - tau.powi(3) + 0.5 * tau.powi(4))
        }
    }

    fn level_gradient(&self, x: &[f64], out: &mut [f64]) {
        let slope = self.level_slope(self.sq_offset(x));
        for ((o, xi), ci) in out.iter_mut().zip(x).zip(&self.center) {
            *o = 2.0 * (xi - ci) * slope;
        }
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.sq_offset(x) <= self.radius * self.radius
    }

    fn project(&self, x: &[f64], out: &mut [f64]) {
        let s = self.sq_offset(x);
        if s <= self.radius * self.radius {
            out.copy_from_slice(x);
            return;
        }
        let scale = self.radius / s.sqrt();
        for ((o, xi), ci) in out.iter_mut().zip(x).zip(&self.center) {
            *o = ci + (xi - ci) * scale;
        }
    }

    fn boundary_distance(&self, x: &[f64]) -> f64 {
        (self.sq_offset(x).sqrt() - self.radius).abs()
    }
}

/// Axis-aligned ellipsoid `sum_i ((x_i - c_i) / a_i)^2 < 1`.
///
/// The level function is `q / sqrt(|grad q|^2 + q^2)` with
/// `q(x) = sum_i ((x_i - c_i) / a_i)^2 - 1`. It is smooth everywhere
/// (the denominator never vanishes because `q(c) = -1`), bounded, and its
/// gradient is `grad q / |grad q|` on the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    center: Vec<f64>,
    semi_axes: Vec<f64>,
}

impl Ellipsoid {
    pub fn new(center: Vec<f64>, semi_axes: Vec<f64>) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::invalid("ellipsoid dimension must be at least 1"));
        }
        if center.len() != semi_axes.len() {
            return Err(Error::invalid(format!(
                "ellipsoid center has {} coordinates but {} semi-axes were given",
                center.len(),
                semi_axes.len()
            )));
        }
        if semi_axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::invalid("ellipsoid semi-axes must be positive"));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("ellipsoid center must be finite"));
        }
        Ok(Self { center, semi_axes })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn semi_axes(&self) -> &[f64] {
        &self.semi_axes
    }

    fn quadratic(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .zip(&self.semi_axes)
            .map(|((xi, ci), ai)| ((xi - ci) / ai).powi(2))
            .sum::<f64>()
            - 1.0
    }

    /// `F(mu) = sum_i (a_i y_i / (a_i^2 + mu))^2 - 1` and its derivative.
    fn secular(&self, y: &[f64], mu: f64) -> (f64, f64) {
        let mut value = -1.0;
        let mut slope = 0.0;
        for (yi, ai) in y.iter().zip(&self.semi_axes) {
            let denom = ai * ai + mu;
            let t = ai * yi / denom;
            value += t * t;
            slope -= 2.0 * t * t / denom;
        }
        (value, slope)
    }

    /// Root of the secular equation in `(lo, hi)`, where `F(lo) > 0 > F(hi)`.
    /// Newton steps that leave the bracket are replaced by bisection.
    fn secular_root(&self, y: &[f64], mut lo: f64, mut hi: f64, start: f64) -> f64 {
        let mut mu = start;
        for _ in 0..SECULAR_MAX_ITER {
            let (value, slope) = self.secular(y, mu);
            if value.abs() <= SECULAR_TOL {
                // one more Newton step squares the residual
                let polished = mu - value / slope;
                return if slope < 0.0 && polished.is_finite() && polished >= lo && polished <= hi {
                    polished
                } else {
                    mu
                };
            }
            if value > 0.0 {
                lo = mu;
            } else {
                hi = mu;
            }
            let newton = mu - value / slope;
            mu = if slope < 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * (1.0 + hi.abs()) {
                break;
            }
        }
        mu
    }

    fn point_from_multiplier(&self, y: &[f64], mu: f64, out: &mut [f64]) {
        for (((o, yi), ai), ci) in out.iter_mut().zip(y).zip(&self.semi_axes).zip(&self.center) {
            *o = ci + ai * ai * yi / (ai * ai + mu);
        }
    }

    /// Closest boundary point to an interior point `c + y`.
    fn nearest_boundary_from_inside(&self, y: &[f64], out: &mut [f64]) {
        let a_min = self.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        let tie = 1e-12 * a_min;
        let on_min_axes: f64 = y
            .iter()
            .zip(&self.semi_axes)
            .filter(|(_, a)| (**a - a_min).abs() <= tie)
            .map(|(yi, _)| yi * yi)
            .sum();
        if on_min_axes > (1e-9 * a_min).powi(2) {
            let lo = -a_min * a_min;
            self.secular_root_inside(y, lo, out);
            return;
        }
        // y has no component along the shortest axes: the multiplier may
        // sit at the pole -a_min^2.
        let mut rest = -1.0;
        for (yi, ai) in y.iter().zip(&self.semi_axes) {
            if (ai - a_min).abs() > tie {
                rest += (ai * yi / (ai * ai - a_min * a_min)).powi(2);
            }
        }
        if rest >= 0.0 {
            self.secular_root_inside(y, -a_min * a_min, out);
            return;
        }
        let mut placed = false;
        for (((o, yi), ai), ci) in out.iter_mut().zip(y).zip(&self.semi_axes).zip(&self.center) {
            if (ai - a_min).abs() > tie {
                *o = ci + ai * ai * yi / (ai * ai - a_min * a_min);
            } else if !placed {
                *o = ci + a_min * (-rest).sqrt();
                placed = true;
            } else {
                *o = *ci;
            }
        }
    }

    fn secular_root_inside(&self, y: &[f64], pole: f64, out: &mut [f64]) {
        // F increases to +inf (or a nonnegative value) at the pole and is
        // negative at 0 for interior points.
        let lo = pole * (1.0 - 1e-15);
        let mu = self.secular_root(y, lo, 0.0, 0.5 * pole);
        self.point_from_multiplier(y, mu, out);
    }
}

impl ConvexSet for Ellipsoid {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn level(&self, x: &[f64]) -> f64 {
        let q = self.quadratic(x);
        let grad_sq: f64 = x
            .iter()
            .zip(&self.center)
            .zip(&self.semi_axes)
            .map(|((xi, ci), ai)| (2.0 * (xi - ci) / (ai * ai)).powi(2))
            .sum();
        q / (grad_sq + q * q).sqrt()
    }

    fn level_gradient(&self, x: &[f64], out: &mut [f64]) {
        let q = self.quadratic(x);
        let mut grad_sq = 0.0;
        for (((o, xi), ci), ai) in out.iter_mut().zip(x).zip(&self.center).zip(&self.semi_axes) {
            *o = 2.0 * (xi - ci) / (ai * ai);
            grad_sq += *o * *o;
        }
        let norm = (grad_sq + q * q).sqrt();
        // grad N = (H grad q + q grad q) / N with H = diag(2 / a^2)
        for (o, ai) in out.iter_mut().zip(&self.semi_axes) {
            let g = *o;
            let grad_norm = (2.0 / (ai * ai) * g + q * g) / norm;
            *o = g / norm - q * grad_norm / (norm * norm);
        }
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.quadratic(x) <= 0.0
    }

    fn project(&self, x: &[f64], out: &mut [f64]) {
        if self.contains(x) {
            out.copy_from_slice(x);
            return;
        }
        let y: Vec<f64> = x.iter().zip(&self.center).map(|(xi, ci)| xi - ci).collect();
        let a_max = self.semi_axes.iter().cloned().fold(0.0, f64::max);
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mu = self.secular_root(&y, 0.0, a_max * y_norm, 0.0);
        self.point_from_multiplier(&y, mu, out);
    }

    fn boundary_distance(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; x.len()];
        if self.contains(x) {
            let y: Vec<f64> = x.iter().zip(&self.center).map(|(xi, ci)| xi - ci).collect();
            self.nearest_boundary_from_inside(&y, &mut z);
        } else {
            self.project(x, &mut z);
        }
        euclid(x, &z)
    }
}

/// Geometry summary of a point: level value, level gradient, projection onto
/// the closed domain and distance to it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryEval {
    pub level: f64,
    pub normal: Vec<f64>,
    pub projection: Vec<f64>,
    pub distance: f64,
}

/// A bounded convex domain.
#[derive(Debug, Clone)]
pub enum ConvexDomain {
    Ball(Ball),
    Ellipsoid(Ellipsoid),
    Custom(Arc<dyn ConvexSet>),
}

impl ConvexDomain {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        Ball::new(center, radius).map(Self::Ball)
    }

    pub fn ellipsoid(center: Vec<f64>, semi_axes: Vec<f64>) -> Result<Self> {
        Ellipsoid::new(center, semi_axes).map(Self::Ellipsoid)
    }

    /// The interval `(lo, hi)` as a one-dimensional ball.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::invalid(format!("empty interval ({lo}, {hi})")));
        }
        Self::ball(vec![0.5 * (lo + hi)], 0.5 * (hi - lo))
    }

    pub fn custom(set: Arc<dyn ConvexSet>) -> Self {
        Self::Custom(set)
    }

    fn set(&self) -> &dyn ConvexSet {
        match self {
            Self::Ball(b) => b,
            Self::Ellipsoid(e) => e,
            Self::Custom(c) => c.as_ref(),
        }
    }

    pub fn dim(&self) -> usize {
        self.set().dim()
    }

    pub fn level(&self, x: &[f64]) -> f64 {
        self.set().level(x)
    }

    pub fn normal_into(&self, x: &[f64], out: &mut [f64]) {
        self.set().level_gradient(x, out)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.set().contains(x)
    }

    pub fn project_into(&self, x: &[f64], out: &mut [f64]) {
        self.set().project(x, out)
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.project_into(x, &mut out);
        out
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        if self.contains(x) {
            return 0.0;
        }
        let p = self.project(x);
        euclid(x, &p)
    }

    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        self.set().boundary_distance(x)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has {} coordinates, domain dimension is {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point has non-finite coordinates"));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<GeometryEval> {
        self.check_point(x)?;
        let mut normal = vec![0.0; x.len()];
        self.normal_into(x, &mut normal);
        let projection = self.project(x);
        let distance = if self.contains(x) { 0.0 } else { euclid(x, &projection) };
        Ok(GeometryEval {
            level: self.level(x),
            normal,
            projection,
            distance,
        })
    }

    /// `delta(x) = 2 (x - proj(x))`, the gradient of the squared distance.
    pub fn penalization_into(&self, x: &[f64], out: &mut [f64]) {
        self.project_into(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = 2.0 * (xi - *o);
        }
    }

    pub fn penalization(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut out = vec![0.0; x.len()];
        self.penalization_into(x, &mut out);
        Ok(out)
    }

    /// Solves `x + lambda * delta(x) = v` in place of `v`.
    ///
    /// Outside the domain the solution lies on the segment from `proj(v)` to
    /// `v`, at `(v + 2 lambda proj(v)) / (1 + 2 lambda)`.
    pub fn resolvent_in_place(&self, v: &mut [f64], lambda: f64, scratch: &mut [f64]) {
        if self.contains(v) {
            return;
        }
        self.project_into(v, scratch);
        let w = 2.0 * lambda;
        let inv = 1.0 / (1.0 + w);
        for (vi, pi) in v.iter_mut().zip(scratch.iter()) {
            *vi = (*vi + w * pi) * inv;
        }
    }

    pub fn resolvent(&self, v: &[f64], lambda: f64) -> Result<Vec<f64>> {
        self.check_point(v)?;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!(
                "resolvent parameter must be a finite nonnegative number, got {lambda}"
            )));
        }
        let mut out = v.to_vec();
        let mut scratch = vec![0.0; v.len()];
        self.resolvent_in_place(&mut out, lambda, &mut scratch);
        Ok(out)
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
