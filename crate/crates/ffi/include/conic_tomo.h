#ifndef CONIC_TOMO_H
#define CONIC_TOMO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtStatus {
  CT_STATUS_OK = 0,
  CT_STATUS_NULL_POINTER = 1,
  CT_STATUS_INVALID_ARGUMENT = 2,
  CT_STATUS_DOMAIN = 3,
  CT_STATUS_NUMERICAL = 4,
  CT_STATUS_UNSUPPORTED = 5,
  CT_STATUS_BUFFER_TOO_SMALL = 6,
  CT_STATUS_IO = 7,
  CT_STATUS_PANIC = 8,
} CtStatus;

typedef enum CtLink {
  CT_LINK_SPHERE = 0,
  CT_LINK_TORUS = 1,
} CtLink;

typedef enum CtRegime {
  CT_REGIME_ONE_CUSP = 0,
  CT_REGIME_SCATTERING = 1,
} CtRegime;

/**
 * Gauge operators `d`, `δ`, `Δ` on a torus grid.
 */
typedef struct CtGauge CtGauge;

/**
 * Collar metric.
 */
typedef struct CtMetric CtMetric;

/**
 * One sample of an integrated geodesic.
 */
typedef struct CtSample {
  double t;
  double x;
  double y[2];
  double lambda;
  double omega[2];
  double energy_drift;
} CtSample;

typedef struct CtGaugeDiagnostics {
  double adjointness;
  double solenoidal;
  double potential;
  double idempotence;
  size_t iterations;
} CtGaugeDiagnostics;

typedef struct CtReconSummary {
  double recovery_error;
  double gauge_violation;
  double data_gap;
  double m0;
  size_t iterations;
  bool converged;
  double seconds;
} CtReconSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; valid until the next call.
 */
const char *ct_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ct_version(void);

/**
 * Exact cone `dx²/x⁴ + g0/x²` with artificial boundary `x0`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum CtStatus ct_metric_new_cone(double x0, enum CtLink link, struct CtMetric **out);

/**
 * # Safety
 * `m` must come from `ct_metric_new_cone` and not be used afterwards.
 */
void ct_metric_free(struct CtMetric *m);

/**
 * Integrate the unit-speed geodesic through `(x, y)` with direction
 * `(λ, ω)` (normalized internally). Writes up to `cap` samples and the total
 * count to `len`; returns `BufferTooSmall` when `cap < len`.
 *
 * # Safety
 * `m` must be a live handle, `y` and `omega` point to two doubles, `buf` to
 * `cap` samples (may be null when `cap` is 0) and `len` to one count.
 */
enum CtStatus ct_geodesic_shoot(const struct CtMetric *m,
                                double x,
                                const double *y,
                                double lambda,
                                const double *omega,
                                double tol,
                                struct CtSample *buf,
                                size_t cap,
                                size_t *len);

/**
 * Largest deviation from the exact conic flow over `n` random
 * initializations.
 *
 * # Safety
 * `m` must be a live handle and `max_error` point to one double.
 */
enum CtStatus ct_cone_comparison(const struct CtMetric *m,
                                 size_t n,
                                 uint64_t seed,
                                 double tol,
                                 double *max_error);

/**
 * Scalar principal symbol of the conjugated Laplacian on functions on the
 * exact-cone model at base point `x`.
 *
 * # Safety
 * `out` must point to one double.
 */
enum CtStatus ct_sigma_laplacian_scalar(enum CtRegime regime,
                                        double x,
                                        double xi,
                                        double eta1,
                                        double eta2,
                                        double f,
                                        double *out);

/**
 * Gauge operators into rank `rank` (1 or 2) on an `nx × n1 × n2` torus grid.
 *
 * # Safety
 * `m` must be a live handle and `out` valid storage for one handle.
 */
enum CtStatus ct_gauge_new(const struct CtMetric *m,
                           size_t nx,
                           size_t n1,
                           size_t n2,
                           size_t rank,
                           double f,
                           double h,
                           struct CtGauge **out);

/**
 * # Safety
 * `g` must come from `ct_gauge_new` and not be used afterwards.
 */
void ct_gauge_free(struct CtGauge *g);

/**
 * Adjointness, solenoidal, potential and idempotence defects.
 *
 * # Safety
 * `g` must be a live handle and `out` point to one struct.
 */
enum CtStatus ct_gauge_diagnostics(const struct CtGauge *g,
                                   double tol,
                                   uint64_t seed,
                                   struct CtGaugeDiagnostics *out);

/**
 * End-to-end recovery of a random gauged rank-`rank` field; `m0 ≤ 0`
 * selects the balanced default.
 *
 * # Safety
 * `m` must be a live handle and `out` point to one struct.
 */
enum CtStatus ct_reconstruct(const struct CtMetric *m,
                             size_t rank,
                             double f,
                             double h,
                             uint64_t seed,
                             size_t nx,
                             size_t n1,
                             size_t n2,
                             double m0,
                             double tol,
                             size_t max_iter,
                             struct CtReconSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONIC_TOMO_H */
