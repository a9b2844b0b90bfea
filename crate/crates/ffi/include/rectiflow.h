#ifndef RECTIFLOW_H
#define RECTIFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum RfStatus {
  RF_STATUS_OK = 0,
  RF_STATUS_NULL_POINTER = 1,
  RF_STATUS_INVALID_ARGUMENT = 2,
  RF_STATUS_CONFIG = 3,
  // Trajectories collapse; the coupling cannot be rectified.
  RF_STATUS_NON_RECTIFIABLE = 4,
  // Singular times, divergence, out-of-support points, bad matrices.
  RF_STATUS_NUMERICAL = 5,
  RF_STATUS_IO = 6,
  // The experiment stopped early; its partial report is still returned.
  RF_STATUS_PARTIAL = 7,
  RF_STATUS_RESOURCE = 8,
  RF_STATUS_PANIC = 9,
} RfStatus;

// Particle coupling handle.
typedef struct RfCoupling RfCoupling;

// Experiment report handle.
typedef struct RfReport RfReport;

// One step of a report. Missing metrics are NaN.
typedef struct RfStep {
  size_t step;
  double c_i;
  double loss;
  double transport_cost;
  double transport_distance;
  double energy_mu0;
  double energy_mu1;
} RfStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *rf_last_error_message(void);

// Library version, a static string.
const char *rf_version(void);

// Pair `n` rows of `x0` with `n` rows of `x1`, both row-major `n x d`.
//
// # Safety
// `x0` and `x1` must point to `n * d` readable doubles, `out` to a writable
// handle slot.
enum RfStatus rf_coupling_new(const double *x0,
                              const double *x1,
                              size_t n,
                              size_t d,
                              struct RfCoupling **out);

// Load a coupling from a particle file.
//
// # Safety
// `path` must be a NUL-terminated string, `out` a writable handle slot.
enum RfStatus rf_coupling_load(const char *path, struct RfCoupling **out);

// Save a coupling to a particle file.
//
// # Safety
// `c` must be a live handle and `path` a NUL-terminated string.
enum RfStatus rf_coupling_save(const struct RfCoupling *c, const char *path);

// Sample `n` pairs of a built-in scenario with default parameters, or with
// `params_json` (a JSON object, may be null).
//
// # Safety
// `name` must be NUL-terminated, `params_json` null or NUL-terminated, `out`
// a writable handle slot.
enum RfStatus rf_scenario_build(const char *name,
                                const char *params_json,
                                size_t n,
                                uint64_t seed,
                                struct RfCoupling **out);

// Release a coupling; null is ignored.
//
// # Safety
// `c` must be null or a handle not yet freed.
void rf_coupling_free(struct RfCoupling *c);

// Number of pairs, 0 for null.
//
// # Safety
// `c` must be null or a live handle.
size_t rf_coupling_len(const struct RfCoupling *c);

// Dimension, 0 for null.
//
// # Safety
// `c` must be null or a live handle.
size_t rf_coupling_dim(const struct RfCoupling *c);

// Copy the source rows (row-major `len x dim`) into `buf`.
//
// # Safety
// `c` must be a live handle, `buf` writable for `len` doubles.
enum RfStatus rf_coupling_copy_x0(const struct RfCoupling *c, double *buf, size_t len);

// Copy the target rows into `buf`.
//
// # Safety
// As [`rf_coupling_copy_x0`].
enum RfStatus rf_coupling_copy_x1(const struct RfCoupling *c, double *buf, size_t len);

// Mean squared displacement.
//
// # Safety
// `c` must be a live handle, `out` writable.
enum RfStatus rf_transport_cost(const struct RfCoupling *c, double *out);

// Optimal cost between the coupling's marginals; `baseline` is one of
// `discrete_exact`, `gaussian_closed_form`, `quantile_1d`.
//
// # Safety
// `c` must be a live handle, `baseline` NUL-terminated, `out` writable.
enum RfStatus rf_baseline_cost(const struct RfCoupling *c, const char *baseline, double *out);

// Energy distance between the target rows of two couplings.
//
// # Safety
// `a`, `b` must be live handles, `out` writable.
enum RfStatus rf_energy_distance_x1(const struct RfCoupling *a,
                                    const struct RfCoupling *b,
                                    double *out);

// One rectification step with the kernel estimator (Scott bandwidth times
// `bandwidth_multiplier`) and `rk4_steps` RK4 steps. `loss` may be null.
//
// # Safety
// `c` must be a live handle, `out` a writable handle slot, `loss` null or
// writable.
enum RfStatus rf_rectify_kernel(const struct RfCoupling *c,
                                double bandwidth_multiplier,
                                size_t rk4_steps,
                                uint64_t seed,
                                struct RfCoupling **out,
                                double *loss);

// Run an experiment from its JSON config. On [`RfStatus::Ok`] and
// [`RfStatus::Partial`] a report is stored in `out`; the output section of
// the config is ignored.
//
// # Safety
// `config_json` must be NUL-terminated, `out` a writable handle slot.
enum RfStatus rf_experiment_run(const char *config_json, struct RfReport **out);

// Release a report; null is ignored.
//
// # Safety
// `r` must be null or a report not yet freed.
void rf_report_free(struct RfReport *r);

// Number of completed steps, 0 for null.
//
// # Safety
// `r` must be null or a live handle.
size_t rf_report_len(const struct RfReport *r);

// Step `i` of the report.
//
// # Safety
// `r` must be a live handle, `out` writable.
enum RfStatus rf_report_step(const struct RfReport *r, size_t i, struct RfStep *out);

// The full report as JSON in a new string, released with [`rf_string_free`].
//
// # Safety
// `r` must be a live handle, `out` writable.
enum RfStatus rf_report_to_json(const struct RfReport *r, char **out);

// Release a string returned by this library; null is ignored.
//
// # Safety
// `s` must be null or a string from this library not yet freed.
void rf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECTIFLOW_H */
