#ifndef AEQUIV_H
#define AEQUIV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Text normalization applied before token comparison.
 */
typedef enum AequivProfile {
  /**
   * Lowercase and strip punctuation.
   */
  AEQUIV_PROFILE_SIMPLE = 0,
  /**
   * Also drop the articles a, an, the.
   */
  AEQUIV_PROFILE_SQUAD_OFFICIAL = 1,
} AequivProfile;

/**
 * Result code of every exported function.
 */
typedef enum AequivStatus {
  AEQUIV_STATUS_OK = 0,
  AEQUIV_STATUS_NULL_POINTER = 1,
  AEQUIV_STATUS_INVALID_UTF8 = 2,
  AEQUIV_STATUS_INVALID_ARGUMENT = 3,
  AEQUIV_STATUS_PANIC = 4,
} AequivStatus;

/**
 * Opaque calibration model.
 */
typedef struct AequivCalibrationModel AequivCalibrationModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null if none.
 */
const char *aequiv_last_error(void);

/**
 * Token F1 between a candidate and a reference answer.
 *
 * # Safety
 * `candidate` and `reference` must be NUL-terminated strings; `out` must
 * be writable.
 */
enum AequivStatus aequiv_token_f1(const char *candidate,
                                  const char *reference,
                                  enum AequivProfile profile,
                                  double *out);

/**
 * Whether the candidate equals any of `n_references` references after
 * normalization.
 *
 * # Safety
 * `references` must point to `n_references` NUL-terminated strings; `out`
 * must be writable.
 */
enum AequivStatus aequiv_exact_match(const char *candidate,
                                     const char *const *references,
                                     uintptr_t n_references,
                                     enum AequivProfile profile,
                                     bool *out);

/**
 * Spearman's rank correlation of two equal-length arrays.
 *
 * # Safety
 * `x` and `y` must each point to `n` doubles; `out` must be writable.
 */
enum AequivStatus aequiv_spearman(const double *x, const double *y, uintptr_t n, double *out);

/**
 * One-sided Clopper-Pearson upper bound on a rate after `k` events in `m`
 * trials, at confidence `1 - gamma`.
 *
 * # Safety
 * `out` must be writable.
 */
enum AequivStatus aequiv_clopper_pearson_upper(uint64_t k, uint64_t m, double gamma, double *out);

/**
 * Conformal p-value of nonconformity `s` against `n` calibration scores
 * (any order).
 *
 * # Safety
 * `calibration` must point to `n` doubles; `out` must be writable.
 */
enum AequivStatus aequiv_p_value(double s, const double *calibration, uintptr_t n, double *out);

/**
 * Build a model from `n` calibration scores (nonconformities, `+inf`
 * allowed) and a correction factor in (0, 1]; use 1 for exact admission.
 *
 * # Safety
 * `scores` must point to `n` doubles; `out` must be writable. The handle
 * must be released with `aequiv_calibration_model_free`.
 */
enum AequivStatus aequiv_calibration_model_new(const double *scores,
                                               uintptr_t n,
                                               double correction,
                                               struct AequivCalibrationModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from `aequiv_calibration_model_new` and not be used
 * afterwards.
 */
void aequiv_calibration_model_free(struct AequivCalibrationModel *model);

/**
 * Mark which of `n` candidates (by model score) enter the prediction set
 * for target accuracy `target`: `included[i]` is set to 1 or 0.
 *
 * # Safety
 * `model` must be a live handle; `scores` must point to `n` doubles and
 * `included` to `n` writable bytes.
 */
enum AequivStatus aequiv_predict_set(const struct AequivCalibrationModel *model,
                                     const double *scores,
                                     uintptr_t n,
                                     double target,
                                     uint8_t *included);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AEQUIV_H */
