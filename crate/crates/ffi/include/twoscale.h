#ifndef TWOSCALE_H
#define TWOSCALE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_POINTER = 1,
  TS_STATUS_INVALID_ARGUMENT = 2,
  TS_STATUS_MODEL = 3,
  TS_STATUS_SPECTRAL = 4,
  TS_STATUS_BOUNDS = 5,
  TS_STATUS_ENGINE = 6,
  TS_STATUS_OUT_OF_RANGE = 7,
  TS_STATUS_PANIC = 8,
} TsStatus;

/**
 * Problem instance handle.
 */
typedef struct TsSpec TsSpec;

/**
 * Recorded trajectory handle.
 */
typedef struct TsTrajectory TsTrajectory;

/**
 * Inputs shared by the bound evaluators.
 */
typedef struct TsBoundsInput {
  double alpha;
  double beta;
  double r1in;
  double r2in;
  double r2out;
  double m1;
  double m2;
  double eps1;
  double eps2;
  uint64_t n0;
} TsBoundsInput;

typedef struct TsLockInBound {
  double bound;
  bool vacuous;
  bool noiseless;
  bool n0_meets_threshold;
  /**
   * Smallest admissible start index.
   */
  uint64_t big_n0;
} TsLockInBound;

typedef struct TsSimulation {
  double alpha;
  double beta;
  /**
   * Sphere-noise scales; zero for deterministic runs.
   */
  double noise_c1;
  double noise_c2;
  uint64_t seed;
  uint64_t trial;
  size_t n_start;
  size_t n_end;
  size_t stride;
  /**
   * Project onto balls of radius `r1in/2`, `r2in/2` at powers of two.
   */
  bool projected;
  double r1in;
  double r2in;
} TsSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *ts_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ts_version(void);

/**
 * Builds a spec from row-major `d×d` matrices and length-`d` vectors.
 *
 * # Safety
 * Every pointer must be valid for the stated number of reads and `out`
 * must be writable.
 */
enum TsStatus ts_spec_new(size_t d,
                          const double *v1,
                          const double *gamma1,
                          const double *w1,
                          const double *v2,
                          const double *gamma2,
                          const double *w2,
                          struct TsSpec **out);

/**
 * Builds a spec from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` writable.
 */
enum TsStatus ts_spec_from_json(const char *json, struct TsSpec **out);

/**
 * # Safety
 * `spec` must come from a `ts_spec_*` constructor and not be used again.
 */
void ts_spec_free(struct TsSpec *spec);

/**
 * Dimension of the spec, or 0 for a null handle.
 *
 * # Safety
 * `spec` must be null or a live handle.
 */
size_t ts_spec_dim(const struct TsSpec *spec);

/**
 * Copies `θ*` into `out[0..len]`; `len` must equal the dimension.
 *
 * # Safety
 * `spec` must be live and `out` writable for `len` doubles.
 */
enum TsStatus ts_spec_theta_star(const struct TsSpec *spec, double *out, size_t len);

/**
 * Lock-in probability bound for the polynomial schedule
 * `((n+1)^-alpha, (n+1)^-beta)`, with the closed-form tail.
 *
 * # Safety
 * `spec` must be live; `input` readable; `out` writable.
 */
enum TsStatus ts_lockin_bound(const struct TsSpec *spec,
                              const struct TsBoundsInput *input,
                              struct TsLockInBound *out);

/**
 * Runs one trajectory from `(theta0, w0)`.
 *
 * # Safety
 * `spec` must be live; `sim` readable; `theta0`, `w0` readable for the
 * spec dimension; `out` writable.
 */
enum TsStatus ts_simulate(const struct TsSpec *spec,
                          const struct TsSimulation *sim,
                          const double *theta0,
                          const double *w0,
                          struct TsTrajectory **out);

/**
 * Number of recorded indices, or 0 for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t ts_trajectory_len(const struct TsTrajectory *traj);

/**
 * Index and errors `‖θ_n − θ*‖`, `‖z_n‖` of record `i`.
 *
 * # Safety
 * `traj` must be live; output pointers writable.
 */
enum TsStatus ts_trajectory_record(const struct TsTrajectory *traj,
                                   size_t i,
                                   size_t *n,
                                   double *err_theta,
                                   double *err_z);

/**
 * # Safety
 * `traj` must come from [`ts_simulate`] and not be used again.
 */
void ts_trajectory_free(struct TsTrajectory *traj);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TWOSCALE_H */
