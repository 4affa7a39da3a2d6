//! C ABI over the penreflect library.
//!
//! Objects are exposed as opaque handles created by the `pr_domain_*` constructors and `pr_config_parse`
//! and released with the matching `pr_*_free`. Every fallible call returns a
//! [`PrStatus`]; on failure the message is kept per thread and can be read
//! with [`pr_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use penreflect::config::{parse_config, RunConfig};
use penreflect::{ConvexDomain, Error, FieldSolver};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    DegenerateBasis = 3,
    ConvergenceFailure = 4,
    SchemeFailure = 5,
    ConfigError = 6,
    IoError = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque convex domain.
pub struct PrDomain {
    inner: ConvexDomain,
}

/// Opaque parsed run configuration.
pub struct PrConfig {
    inner: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> PrStatus {
    match err {
        Error::InvalidInput(_) => PrStatus::InvalidInput,
        Error::DegenerateBasis { .. } => PrStatus::DegenerateBasis,
        Error::ConvergenceFailure { .. } => PrStatus::ConvergenceFailure,
        Error::SchemeFailure(_) => PrStatus::SchemeFailure,
        Error::Config(_) => PrStatus::ConfigError,
        Error::Io(_) => PrStatus::IoError,
    }
}

enum Fail {
    Null(&'static str),
    Small(usize),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> PrStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => PrStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PrStatus::NullPointer
        }
        Ok(Err(Fail::Small(need))) => {
            set_error(format!("output buffer too small: {need} entries needed"));
            PrStatus::BufferTooSmall
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PrStatus::Panic
        }
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidInput(format!("{what} is not valid UTF-8"))))
}

unsafe fn domain_ref<'a>(h: *const PrDomain) -> Result<&'a ConvexDomain, Fail> {
    h.as_ref().map(|d| &d.inner).ok_or(Fail::Null("domain"))
}

unsafe fn config_ref<'a>(h: *const PrConfig) -> Result<&'a RunConfig, Fail> {
    h.as_ref().map(|c| &c.inner).ok_or(Fail::Null("config"))
}

unsafe fn store_domain(out: *mut *mut PrDomain, d: ConvexDomain) -> Result<(), Fail> {
    *out = Box::into_raw(Box::new(PrDomain { inner: d }));
    Ok(())
}

/// Copies the last error message of the calling thread into `buf`
/// (NUL-terminated, truncated to `len - 1` bytes). Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Closed ball with the given center (`dim` entries) and radius.
///
/// # Safety
/// `center` must point to `dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_domain_ball(center: *const f64, dim: usize, radius: f64, out: *mut *mut PrDomain) -> PrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let c = input(center, dim, "center")?;
        store_domain(out, ConvexDomain::ball(c.to_vec(), radius)?)
    })
}

/// Axis-aligned ellipsoid with `dim` semi-axes.
///
/// # Safety
/// `center` and `semi_axes` must point to `dim` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_domain_ellipsoid(center: *const f64, semi_axes: *const f64, dim: usize, out: *mut *mut PrDomain) -> PrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let c = input(center, dim, "center")?;
        let a = input(semi_axes, dim, "semi_axes")?;
        store_domain(out, ConvexDomain::ellipsoid(c.to_vec(), a.to_vec())?)
    })
}

/// One-dimensional interval `[lo, hi]`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_domain_interval(lo: f64, hi: f64, out: *mut *mut PrDomain) -> PrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        store_domain(out, ConvexDomain::interval(lo, hi)?)
    })
}

/// Releases a domain handle. Null is ignored.
///
/// # Safety
/// `domain` must come from a `pr_domain_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pr_domain_free(domain: *mut PrDomain) {
    if !domain.is_null() {
        drop(Box::from_raw(domain));
    }
}

/// Spatial dimension, or 0 for a null handle.
///
/// # Safety
/// `domain` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_domain_dim(domain: *const PrDomain) -> usize {
    domain.as_ref().map_or(0, |d| d.inner.dim())
}

/// Level function value at `x`.
///
/// # Safety
/// `x` must point to `dim` doubles and `level` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_domain_level(domain: *const PrDomain, x: *const f64, level: *mut f64) -> PrStatus {
    guard(|| {
        let d = domain_ref(domain)?;
        let x = input(x, d.dim(), "x")?;
        let out = output(level, 1, "level")?;
        out[0] = d.level(x);
        Ok(())
    })
}

/// Projection of `x` onto the closed domain, written to `out` (`dim` entries).
///
/// # Safety
/// `x` and `out` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pr_domain_project(domain: *const PrDomain, x: *const f64, out: *mut f64) -> PrStatus {
    guard(|| {
        let d = domain_ref(domain)?;
        let x = input(x, d.dim(), "x")?;
        let o = output(out, d.dim(), "out")?;
        d.project_into(x, o);
        Ok(())
    })
}

/// Penalization vector `2 (x - proj(x))`, written to `out`.
///
/// # Safety
/// `x` and `out` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pr_domain_penalization(domain: *const PrDomain, x: *const f64, out: *mut f64) -> PrStatus {
    guard(|| {
        let d = domain_ref(domain)?;
        let x = input(x, d.dim(), "x")?;
        let p = d.penalization(x)?;
        output(out, d.dim(), "out")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Semi-implicit penalized step `(v + 2 lambda proj(v)) / (1 + 2 lambda)`.
///
/// # Safety
/// `v` and `out` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pr_domain_resolvent(domain: *const PrDomain, v: *const f64, lambda: f64, out: *mut f64) -> PrStatus {
    guard(|| {
        let d = domain_ref(domain)?;
        let v = input(v, d.dim(), "v")?;
        let r = d.resolvent(v, lambda)?;
        output(out, d.dim(), "out")?.copy_from_slice(&r);
        Ok(())
    })
}

/// Parses a TOML run configuration. On a validation failure the message
/// lists every offending key.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_config_parse(toml: *const c_char, out: *mut *mut PrConfig) -> PrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let cfg = parse_config(text(toml, "toml")?)?;
        *out = Box::into_raw(Box::new(PrConfig { inner: cfg }));
        Ok(())
    })
}

/// Releases a configuration handle. Null is ignored.
///
/// # Safety
/// `config` must come from [`pr_config_parse`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pr_config_free(config: *mut PrConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the configured command, writing artifacts into `out_dir`.
/// `passed` receives 1 if every study verdict passed, else 0.
///
/// # Safety
/// `out_dir` must be a NUL-terminated path; `passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_run(config: *const PrConfig, out_dir: *const c_char, passed: *mut i32) -> PrStatus {
    guard(|| {
        let cfg = config_ref(config)?;
        let dir = text(out_dir, "out_dir")?;
        if passed.is_null() {
            return Err(Fail::Null("passed"));
        }
        let outcome = penreflect::cli::run(cfg, Path::new(dir))?;
        *passed = i32::from(outcome.passed);
        Ok(())
    })
}

/// Estimates `u(t, x)` with the domain, diffusion, problem, grid, ensemble
/// and scheme of `config`. `value` and `stderr` each receive `capacity`
/// entries at most; `components` receives the number of components.
///
/// # Safety
/// `x` must point to `dim` doubles, `value` and `stderr` to `capacity`
/// doubles, and `components` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_field_evaluate(
    config: *const PrConfig,
    t: f64,
    x: *const f64,
    dim: usize,
    value: *mut f64,
    stderr: *mut f64,
    capacity: usize,
    components: *mut usize,
) -> PrStatus {
    guard(|| {
        let cfg = config_ref(config)?;
        let x = input(x, dim, "x")?;
        if components.is_null() {
            return Err(Fail::Null("components"));
        }
        let problem = cfg
            .problem
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("config has no [problem] section".into()))?
            .build();
        let domain = cfg.domain.build()?;
        let spec = cfg.diffusion.build(domain.dim())?;
        let solver = FieldSolver {
            spec: &spec,
            domain: &domain,
            problem: &problem,
            options: cfg.bsde,
            horizon: cfg.grid.horizon,
        };
        let e = solver.evaluate(t, x, cfg.scheme.field_scheme(), cfg.ensemble.paths, cfg.grid.steps, cfg.ensemble.seed)?;
        let k = e.value.len();
        *components = k;
        if capacity < k {
            return Err(Fail::Small(k));
        }
        output(value, k, "value")?.copy_from_slice(&e.value);
        output(stderr, k, "stderr")?.copy_from_slice(&e.stderr);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn message() -> String {
        let mut buf = vec![0 as c_char; 256];
        let n = unsafe { pr_last_error_message(buf.as_mut_ptr(), buf.len()) };
        let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned();
        assert_eq!(s.len(), n.min(255));
        s
    }

    #[test]
    fn ball_projection_roundtrip() {
        let mut d = ptr::null_mut();
        let c = [0.0, 0.0];
        assert_eq!(unsafe { pr_domain_ball(c.as_ptr(), 2, 1.0, &mut d) }, PrStatus::Ok);
        assert_eq!(unsafe { pr_domain_dim(d) }, 2);
        let x = [3.0, 4.0];
        let mut p = [0.0; 2];
        assert_eq!(unsafe { pr_domain_project(d, x.as_ptr(), p.as_mut_ptr()) }, PrStatus::Ok);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        let mut delta = [0.0; 2];
        assert_eq!(unsafe { pr_domain_penalization(d, x.as_ptr(), delta.as_mut_ptr()) }, PrStatus::Ok);
        assert!((delta[0] - 4.8).abs() < 1e-12 && (delta[1] - 6.4).abs() < 1e-12);
        unsafe { pr_domain_free(d) };
    }

    #[test]
    fn invalid_radius_sets_message() {
        let mut d = ptr::null_mut();
        let c = [0.0];
        assert_eq!(unsafe { pr_domain_ball(c.as_ptr(), 1, -1.0, &mut d) }, PrStatus::InvalidInput);
        assert!(d.is_null());
        assert!(message().contains("radius"), "{}", message());
    }

    #[test]
    fn null_handles_are_rejected() {
        let x = [0.0];
        let mut l = 0.0;
        assert_eq!(unsafe { pr_domain_level(ptr::null(), x.as_ptr(), &mut l) }, PrStatus::NullPointer);
        assert_eq!(unsafe { pr_domain_dim(ptr::null()) }, 0);
        unsafe { pr_domain_free(ptr::null_mut()) };
        unsafe { pr_config_free(ptr::null_mut()) };
    }

    #[test]
    fn config_errors_map_to_status() {
        let bad = CString::new("command = \"evaluate-field\"\n[domain]\nkind = \"ball\"\nradius = -2.0\n").unwrap();
        let mut c = ptr::null_mut();
        assert_eq!(unsafe { pr_config_parse(bad.as_ptr(), &mut c) }, PrStatus::ConfigError);
        assert!(message().contains("domain.radius"), "{}", message());
    }

    #[test]
    fn field_at_horizon_is_terminal_value() {
        let text = CString::new(
            "command = \"evaluate-field\"\n[domain]\nkind = \"interval\"\nlo = -1.0\nhi = 1.0\n\
             [problem]\nkind = \"constant\"\nterminal = 0.25\n[ensemble]\npaths = 50\n[field]\npoints = [[1.0, 0.3]]\n",
        )
        .unwrap();
        let mut c = ptr::null_mut();
        assert_eq!(unsafe { pr_config_parse(text.as_ptr(), &mut c) }, PrStatus::Ok, "{}", message());
        let x = [0.3];
        let (mut v, mut s, mut k) = ([0.0; 1], [0.0; 1], 0usize);
        let st = unsafe { pr_field_evaluate(c, 1.0, x.as_ptr(), 1, v.as_mut_ptr(), s.as_mut_ptr(), 1, &mut k) };
        assert_eq!(st, PrStatus::Ok, "{}", message());
        assert_eq!(k, 1);
        assert_eq!((v[0], s[0]), (0.25, 0.0));
        let st = unsafe { pr_field_evaluate(c, 1.0, x.as_ptr(), 1, v.as_mut_ptr(), s.as_mut_ptr(), 0, &mut k) };
        assert_eq!(st, PrStatus::BufferTooSmall);
        unsafe { pr_config_free(c) };
    }
}
