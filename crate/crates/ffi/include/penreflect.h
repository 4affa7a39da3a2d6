#ifndef PENREFLECT_H
#define PENREFLECT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum PrStatus {
  PR_STATUS_OK = 0,
  PR_STATUS_NULL_POINTER = 1,
  PR_STATUS_INVALID_INPUT = 2,
  PR_STATUS_DEGENERATE_BASIS = 3,
  PR_STATUS_CONVERGENCE_FAILURE = 4,
  PR_STATUS_SCHEME_FAILURE = 5,
  PR_STATUS_CONFIG_ERROR = 6,
  PR_STATUS_IO_ERROR = 7,
  PR_STATUS_BUFFER_TOO_SMALL = 8,
  PR_STATUS_PANIC = 9,
} PrStatus;

// Opaque parsed run configuration.
typedef struct PrConfig PrConfig;

// Opaque convex domain.
typedef struct PrDomain PrDomain;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of the calling thread into `buf`
// (NUL-terminated, truncated to `len - 1` bytes). Returns the full message
// length in bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
uintptr_t pr_last_error_message(char *buf, uintptr_t len);

// Closed ball with the given center (`dim` entries) and radius.
//
// # Safety
// `center` must point to `dim` readable doubles; `out` must be writable.
enum PrStatus pr_domain_ball(const double *center,
                             uintptr_t dim,
                             double radius,
                             struct PrDomain **out);

// Axis-aligned ellipsoid with `dim` semi-axes.
//
// # Safety
// `center` and `semi_axes` must point to `dim` readable doubles; `out` must be writable.
enum PrStatus pr_domain_ellipsoid(const double *center,
                                  const double *semi_axes,
                                  uintptr_t dim,
                                  struct PrDomain **out);

// One-dimensional interval `[lo, hi]`.
//
// # Safety
// `out` must be writable.
enum PrStatus pr_domain_interval(double lo, double hi, struct PrDomain **out);

// Releases a domain handle. Null is ignored.
//
// # Safety
// `domain` must come from a `pr_domain_*` constructor and not be used afterwards.
void pr_domain_free(struct PrDomain *domain);

// Spatial dimension, or 0 for a null handle.
//
// # Safety
// `domain` must be null or a live handle.
uintptr_t pr_domain_dim(const struct PrDomain *domain);

// Level function value at `x`.
//
// # Safety
// `x` must point to `dim` doubles and `level` must be writable.
enum PrStatus pr_domain_level(const struct PrDomain *domain, const double *x, double *level);

// Projection of `x` onto the closed domain, written to `out` (`dim` entries).
//
// # Safety
// `x` and `out` must point to `dim` doubles.
enum PrStatus pr_domain_project(const struct PrDomain *domain, const double *x, double *out);

// Penalization vector `2 (x - proj(x))`, written to `out`.
//
// # Safety
// `x` and `out` must point to `dim` doubles.
enum PrStatus pr_domain_penalization(const struct PrDomain *domain, const double *x, double *out);

// Semi-implicit penalized step `(v + 2 lambda proj(v)) / (1 + 2 lambda)`.
//
// # Safety
// `v` and `out` must point to `dim` doubles.
enum PrStatus pr_domain_resolvent(const struct PrDomain *domain,
                                  const double *v,
                                  double lambda,
                                  double *out);

// Parses a TOML run configuration. On a validation failure the message
// lists every offending key.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum PrStatus pr_config_parse(const char *toml, struct PrConfig **out);

// Releases a configuration handle. Null is ignored.
//
// # Safety
// `config` must come from [`pr_config_parse`] and not be used afterwards.
void pr_config_free(struct PrConfig *config);

// Runs the configured command, writing artifacts into `out_dir`.
// `passed` receives 1 if every study verdict passed, else 0.
//
// # Safety
// `out_dir` must be a NUL-terminated path; `passed` must be writable.
enum PrStatus pr_run(const struct PrConfig *config, const char *out_dir, int32_t *passed);

// Estimates `u(t, x)` with the domain, diffusion, problem, grid, ensemble
// and scheme of `config`. `value` and `stderr` each receive `capacity`
// entries at most; `components` receives the number of components.
//
// # Safety
// `x` must point to `dim` doubles, `value` and `stderr` to `capacity`
// doubles, and `components` must be writable.
enum PrStatus pr_field_evaluate(const struct PrConfig *config,
                                double t,
                                const double *x,
                                uintptr_t dim,
                                double *value,
                                double *stderr,
                                uintptr_t capacity,
                                uintptr_t *components);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PENREFLECT_H */
