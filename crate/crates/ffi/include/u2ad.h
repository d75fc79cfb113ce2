#ifndef U2AD_H
#define U2AD_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum U2adStatus {
  U2AD_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  U2AD_STATUS_NULL_POINTER = 1,
  /**
   * Arguments are inconsistent (lengths, ranges, encoding).
   */
  U2AD_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Bad configuration or an unusable run directory.
   */
  U2AD_STATUS_CONFIG = 3,
  /**
   * Input data could not be read or has the wrong shape.
   */
  U2AD_STATUS_DATA = 4,
  /**
   * Numerical failure while scoring.
   */
  U2AD_STATUS_RUNTIME = 5,
  /**
   * A panic was caught at the boundary.
   */
  U2AD_STATUS_PANIC = 6,
} U2adStatus;

/**
 * Trained detector. Created by [`u2ad_model_open`], released by
 * [`u2ad_model_free`].
 */
typedef struct U2adModel U2adModel;

/**
 * Detection metrics. Fractions lie in [0, 1]; a field that is undefined
 * for the given labels (no episode, single class) is NaN.
 */
typedef struct U2adMetrics {
  double precision;
  double recall;
  double f1;
  double add;
  double nrd;
  double auc_roc;
  double auc_pr;
  double vus_roc;
  double vus_pr;
} U2adMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string. Do not free.
 */
const char *u2ad_version(void);

/**
 * Copy of the calling thread's last error message, or null when the last
 * call succeeded. Release with [`u2ad_string_free`].
 */
char *u2ad_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void u2ad_string_free(char *s);

/**
 * Opens the run directory written by training (manifest and best
 * checkpoint). Scoring uses the run's own configuration.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated UTF-8 path; `out` must be writable.
 */
enum U2adStatus u2ad_model_open(const char *run_dir, struct U2adModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`u2ad_model_open`] and not have been freed.
 */
void u2ad_model_free(struct U2adModel *model);

/**
 * Window length the model was trained with, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t u2ad_model_window(const struct U2adModel *model);

/**
 * Channel count the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t u2ad_model_channels(const struct U2adModel *model);

/**
 * Scores a raw series of `len` rows by `channels` columns, row-major,
 * writing one anomaly score per row to `scores`. The series must be at
 * least one window long. Deterministic for a given handle and input.
 *
 * # Safety
 * `values` must hold `len * channels` doubles and `scores` room for `len`.
 */
enum U2adStatus u2ad_model_score(const struct U2adModel *model,
                                 const double *values,
                                 size_t len,
                                 size_t channels,
                                 double *scores);

/**
 * Threshold flagging about `ratio` percent of `pool`, then predictions
 * (`score > threshold`) for `scores`. `predictions` may be null when only
 * the threshold is wanted.
 *
 * # Safety
 * Arrays must hold the stated lengths; `threshold` must be writable.
 */
enum U2adStatus u2ad_threshold(const double *scores,
                               size_t n_scores,
                               const double *pool,
                               size_t n_pool,
                               double ratio,
                               double *threshold,
                               uint8_t *predictions);

/**
 * All detection metrics for one labeled series. `vus_max_buffer` is the
 * largest soft-label buffer swept for VUS; a negative value sweeps up to the
 * median episode length.
 *
 * # Safety
 * The three arrays must hold `len` elements; `out` must be writable.
 */
enum U2adStatus u2ad_metrics(const uint8_t *labels,
                             const double *scores,
                             const uint8_t *predictions,
                             size_t len,
                             int64_t vus_max_buffer,
                             struct U2adMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* U2AD_H */
