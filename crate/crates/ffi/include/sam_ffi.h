#ifndef SAM_FFI_H
#define SAM_FFI_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SamStatus {
  SAM_STATUS_OK = 0,
  SAM_STATUS_NULL_POINTER = 1,
  SAM_STATUS_INVALID_ARGUMENT = 2,
  SAM_STATUS_OUT_OF_RANGE = 3,
  SAM_STATUS_IO = 4,
  SAM_STATUS_FORMAT = 5,
  SAM_STATUS_RUNTIME = 6,
  SAM_STATUS_PANIC = 7,
} SamStatus;

/**
 * A frozen age predictor loaded from an `age_predictor` checkpoint.
 */
typedef struct SamAgePredictorHandle SamAgePredictorHandle;

/**
 * A trained model loaded from a `sam` checkpoint.
 */
typedef struct SamModelHandle SamModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread; empty if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *sam_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sam_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SamStatus sam_model_load(const char *path, struct SamModelHandle **out);

/**
 * # Safety
 * `model` must come from [`sam_model_load`] and not be used afterwards. NULL is ignored.
 */
void sam_model_free(struct SamModelHandle *model);

/**
 * Image side length and latent shape of a loaded model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum SamStatus sam_model_shape(const struct SamModelHandle *model,
                               size_t *resolution,
                               size_t *layers,
                               size_t *dim);

/**
 * Transforms an image to `target_age`; writes `3 * R * R` values to `out`.
 *
 * # Safety
 * `pixels` must hold `pixels_len` doubles and `out` at least `out_len`.
 */
enum SamStatus sam_transform(const struct SamModelHandle *model,
                             const double *pixels,
                             size_t pixels_len,
                             double target_age,
                             double *out,
                             size_t out_len);

/**
 * The latent code the model produces for `target_age`; writes `L * D` values.
 *
 * # Safety
 * As for [`sam_transform`].
 */
enum SamStatus sam_transform_latent(const struct SamModelHandle *model,
                                    const double *pixels,
                                    size_t pixels_len,
                                    double target_age,
                                    double *out,
                                    size_t out_len);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SamStatus sam_age_predictor_load(const char *path, struct SamAgePredictorHandle **out);

/**
 * # Safety
 * `predictor` must come from [`sam_age_predictor_load`]. NULL is ignored.
 */
void sam_age_predictor_free(struct SamAgePredictorHandle *predictor);

/**
 * Predicted age in years of a `resolution x resolution` image.
 *
 * # Safety
 * `pixels` must hold `pixels_len` doubles; `out_age` must be valid.
 */
enum SamStatus sam_age_predict(const struct SamAgePredictorHandle *predictor,
                               const double *pixels,
                               size_t pixels_len,
                               size_t resolution,
                               double *out_age);

/**
 * Rows `start..=end` from `reference`, the rest from `base`; all `layers * dim` long.
 *
 * # Safety
 * `base`, `reference` and `out` must each hold `layers * dim` doubles.
 */
enum SamStatus sam_style_mix(const double *base,
                             const double *reference,
                             size_t layers,
                             size_t dim,
                             size_t start,
                             size_t end,
                             double *out);

/**
 * `|source - target| / 100`.
 */
double sam_delta_age(double source, double target);

/**
 * Identity-loss weight for a normalized age difference in `[0, 1]`.
 *
 * # Safety
 * `out` must be valid.
 */
enum SamStatus sam_age_weight(double delta, double *out);

/**
 * Index of the prediction nearest to `target` (lowest index on ties).
 *
 * # Safety
 * `predicted` must hold `n` doubles; `out_index` must be valid.
 */
enum SamStatus sam_select_nearest_age(const double *predicted,
                                      size_t n,
                                      double target,
                                      size_t *out_index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAM_FFI_H */
