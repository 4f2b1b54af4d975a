#ifndef SAMMESE_H
#define SAMMESE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  SM_STATUS_OK = 0,
  SM_STATUS_NULL_POINTER = 1,
  SM_STATUS_INVALID_ARGUMENT = 2,
  SM_STATUS_CONFIG = 3,
  SM_STATUS_IO = 4,
  SM_STATUS_CHECKPOINT = 5,
  SM_STATUS_SHAPE = 6,
  SM_STATUS_DATA = 7,
  SM_STATUS_PANIC = 8,
} SmStatus;

/**
 * Opaque model handle.
 */
typedef struct SmModel SmModel;

/**
 * Scores of one prediction against its ground truth.
 */
typedef struct {
  double mae;
  double f_beta_max;
  double f_beta_mean;
  double s_measure;
  double e_measure_max;
  double e_measure_mean;
} SmMetrics;

/**
 * One derived box prompt, inclusive pixel bounds.
 */
typedef struct {
  size_t x_min;
  size_t y_min;
  size_t x_max;
  size_t y_max;
} SmBox;

/**
 * One derived foreground point.
 */
typedef struct {
  size_t x;
  size_t y;
} SmPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null after a successful call. The
 * pointer stays valid until the next call on the same thread.
 */
const char *sm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sm_version(void);

/**
 * Build a freshly initialised model from config text (`key = value` lines).
 *
 * # Safety
 * `config` must be a NUL-terminated string or null; `out` must be writable.
 */
SmStatus sm_model_from_config(const char *config, SmModel **out);

/**
 * Load a model from a checkpoint written by `sammese train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string or null; `out` must be writable.
 */
SmStatus sm_model_load(const char *path, SmModel **out);

/**
 * Write the model's parameters to a checkpoint.
 *
 * # Safety
 * `model` must come from a constructor here; `path` a NUL-terminated string.
 */
SmStatus sm_model_save(const SmModel *model, const char *path);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from a constructor here and not be used afterwards.
 */
void sm_model_free(SmModel *model);

/**
 * Number of learnable scalars.
 *
 * # Safety
 * `model` must come from a constructor here; `out` must be writable.
 */
SmStatus sm_model_trainable_count(const SmModel *model, size_t *out);

/**
 * Side length of the model's square input.
 *
 * # Safety
 * `model` must come from a constructor here; `out` must be writable.
 */
SmStatus sm_model_input_size(const SmModel *model, size_t *out);

/**
 * Saliency map for one RGB / auxiliary pair, written at the input size.
 *
 * `rgb` holds `height * width * 3` bytes, `aux` holds
 * `height * width * aux_channels` bytes (1 or 3), and `out` receives
 * `height * width` probabilities.
 *
 * # Safety
 * Buffers must be valid for the stated lengths.
 */
SmStatus sm_model_predict(const SmModel *model,
                          const uint8_t *rgb,
                          const uint8_t *aux,
                          size_t aux_channels,
                          size_t width,
                          size_t height,
                          double *out);

/**
 * Score a saliency map in `[0, 1]` against a binary ground truth.
 *
 * # Safety
 * `pred` and `gt` must hold `height * width` values; `out` must be writable.
 */
SmStatus sm_evaluate(const double *pred,
                     const double *gt,
                     size_t width,
                     size_t height,
                     SmMetrics *out);

/**
 * Boxes and points derived from a coarse map.
 *
 * At most `box_cap` boxes and `point_cap` points are written; the full
 * counts go to `n_boxes` and `n_points`, so a call with zero capacities
 * sizes the buffers.
 *
 * # Safety
 * `coarse` must hold `height * width` values; `boxes` / `points` must hold
 * their capacities (or be null when the capacity is 0).
 */
SmStatus sm_derive_prompts(const double *coarse,
                           size_t width,
                           size_t height,
                           double threshold,
                           double min_area_fraction,
                           size_t max_points,
                           SmBox *boxes,
                           size_t box_cap,
                           size_t *n_boxes,
                           SmPoint *points,
                           size_t point_cap,
                           size_t *n_points);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAMMESE_H */
