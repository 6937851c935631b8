#ifndef EXTBAL_H
#define EXTBAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define EXTBAL_METHOD_IPW 0

#define EXTBAL_METHOD_IPW_ET 1

#define EXTBAL_METHOD_EBAL 2

#define EXTBAL_METHOD_EXTENDED 3

typedef enum ExtbalStatus {
  EXTBAL_STATUS_OK = 0,
  EXTBAL_STATUS_NULL_POINTER = 1,
  EXTBAL_STATUS_INVALID_ARGUMENT = 2,
  EXTBAL_STATUS_NON_CONVERGED = 3,
  EXTBAL_STATUS_RANK_DEFICIENT = 4,
  EXTBAL_STATUS_SEPARATION_DETECTED = 5,
  EXTBAL_STATUS_IO = 6,
  EXTBAL_STATUS_PANIC = 7,
} ExtbalStatus;

/**
 * Opaque balancing basis bound to the covariate names of a sample.
 */
typedef struct ExtbalBasis ExtbalBasis;

/**
 * Opaque source sample.
 */
typedef struct ExtbalSample ExtbalSample;

/**
 * Solver settings. Obtain defaults from [`extbal_options_default`].
 */
typedef struct ExtbalOptions {
  /**
   * Gradient sup-norm tolerance of the dual solver.
   */
  double tol;
  uint32_t max_iter;
  /**
   * Rescale each arm's weights to sum to the sample size.
   */
  bool normalize;
} ExtbalOptions;

/**
 * Result of [`extbal_estimate`].
 */
typedef struct ExtbalEstimate {
  double tau_hat;
  double ess_treated;
  double ess_control;
  double weight_min;
  double weight_max;
  /**
   * Newton iterations of the balancing solver; 0 for plain IPW.
   */
  uint32_t iterations;
} ExtbalEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *extbal_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next `extbal_*` call on the same thread.
 */
const char *extbal_last_error_message(void);

struct ExtbalOptions extbal_options_default(void);

/**
 * Builds a sample from a row-major `n × p` covariate array, `n` treatment
 * flags (0 or 1) and `n` outcomes. Covariates are named `x1..xp`.
 *
 * # Safety
 * Each array must hold the stated number of elements; `out` must be writable.
 */
enum ExtbalStatus extbal_sample_new(size_t n,
                                    size_t p,
                                    const double *covariates,
                                    const uint8_t *treatment,
                                    const double *outcome,
                                    struct ExtbalSample **out);

/**
 * Reads a sample from a CSV file with columns `treatment`, `outcome` and
 * numeric covariates.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ExtbalStatus extbal_sample_from_csv(const char *path, struct ExtbalSample **out);

/**
 * Number of units, or 0 for a null handle.
 *
 * # Safety
 * `sample` must be null or a live handle.
 */
size_t extbal_sample_n(const struct ExtbalSample *sample);

/**
 * Number of covariates, or 0 for a null handle.
 *
 * # Safety
 * `sample` must be null or a live handle.
 */
size_t extbal_sample_p(const struct ExtbalSample *sample);

/**
 * # Safety
 * `sample` must be null or a handle not yet freed.
 */
void extbal_sample_free(struct ExtbalSample *sample);

/**
 * Parses a basis such as `"H: x1, x2^2; G: x3"` against the covariate
 * names of `sample`. The constant term is added first on the H side.
 *
 * # Safety
 * `sample` must be a live handle, `text` NUL-terminated, `out` writable.
 */
enum ExtbalStatus extbal_basis_parse(const struct ExtbalSample *sample,
                                     const char *text,
                                     struct ExtbalBasis **out);

/**
 * Number of H terms including the constant, or 0 for a null handle. This
 * is the length of the target-means array.
 *
 * # Safety
 * `basis` must be null or a live handle.
 */
size_t extbal_basis_h_len(const struct ExtbalBasis *basis);

/**
 * # Safety
 * `basis` must be null or a live handle.
 */
size_t extbal_basis_g_len(const struct ExtbalBasis *basis);

/**
 * # Safety
 * `basis` must be null or a handle not yet freed.
 */
void extbal_basis_free(struct ExtbalBasis *basis);

/**
 * Estimates the target-population ATE. `target` holds the target means of
 * the H terms in basis order, constant first. `options` may be null.
 *
 * # Safety
 * Handles must be live, `target` must hold `target_len` values, and `out`
 * must be writable.
 */
enum ExtbalStatus extbal_estimate(const struct ExtbalSample *sample,
                                  const struct ExtbalBasis *basis,
                                  uint32_t method,
                                  const double *target,
                                  size_t target_len,
                                  const struct ExtbalOptions *options,
                                  struct ExtbalEstimate *out);

/**
 * Writes one weight per unit into `weights`, which must hold exactly
 * `extbal_sample_n(sample)` values.
 *
 * # Safety
 * As for [`extbal_estimate`]; `weights` must hold `weights_len` values.
 */
enum ExtbalStatus extbal_weights(const struct ExtbalSample *sample,
                                 const struct ExtbalBasis *basis,
                                 uint32_t method,
                                 const double *target,
                                 size_t target_len,
                                 const struct ExtbalOptions *options,
                                 double *weights,
                                 size_t weights_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXTBAL_H */
