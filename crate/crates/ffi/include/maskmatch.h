#ifndef MASKMATCH_H
#define MASKMATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum MmStatus {
  MM_STATUS_OK = 0,
  MM_STATUS_NULL_POINTER = 1,
  MM_STATUS_INVALID_UTF8 = 2,
  MM_STATUS_CONFIG = 3,
  MM_STATUS_SHAPE = 4,
  MM_STATUS_IO = 5,
  MM_STATUS_FORMAT = 6,
  MM_STATUS_NON_FINITE = 7,
  MM_STATUS_INVALID = 8,
  MM_STATUS_PANIC = 9,
} MmStatus;

/**
 * Dataset splits.
 */
typedef enum MmSplit {
  MM_SPLIT_LABELED = 0,
  MM_SPLIT_UNLABELED = 1,
  MM_SPLIT_VAL = 2,
} MmSplit;

/**
 * Training configuration handle.
 */
typedef struct MmConfig MmConfig;

/**
 * Trained teacher network loaded from a checkpoint.
 */
typedef struct MmModel MmModel;

/**
 * Evaluation summary.
 */
typedef struct MmMetrics {
  double miou;
  double boundary_f;
  double boundary_precision;
  double boundary_recall;
  double pixel_accuracy;
  uint64_t step;
} MmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mm_version(void);

/**
 * Writes the synthetic dataset to `out_dir`.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated string.
 */
enum MmStatus mm_generate_dataset(const char *out_dir,
                                  uint32_t num_classes,
                                  uint32_t height,
                                  uint32_t width,
                                  uint32_t labeled,
                                  uint32_t unlabeled,
                                  uint32_t val,
                                  uint64_t seed);

/**
 * New configuration with default values.
 */
struct MmConfig *mm_config_new(void);

/**
 * # Safety
 * `config` must be NULL or a handle from [`mm_config_new`] not yet freed.
 */
void mm_config_free(struct MmConfig *config);

/**
 * Sets one dotted key, e.g. `train.mode` to `full`.
 *
 * # Safety
 * `config` must be a live handle; `key` and `value` valid NUL-terminated strings.
 */
enum MmStatus mm_config_set(struct MmConfig *config, const char *key, const char *value);

/**
 * Trains with `config` and writes the final validation metrics to `out`.
 *
 * # Safety
 * `config` must be a live handle; `out` NULL or writable.
 */
enum MmStatus mm_train(const struct MmConfig *config, struct MmMetrics *out);

/**
 * Loads a checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` writable.
 */
enum MmStatus mm_model_load(const char *path, struct MmModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`mm_model_load`] not yet freed.
 */
void mm_model_free(struct MmModel *model);

/**
 * Number of classes predicted by `model`, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uint32_t mm_model_num_classes(const struct MmModel *model);

/**
 * Predicts class ids for one planar RGB image (`3 * height * width` values in
 * `[0, 1]`, channel-major) into `labels` (`height * width` bytes).
 *
 * # Safety
 * `image` must point to `3 * height * width` doubles and `labels` to
 * `height * width` writable bytes.
 */
enum MmStatus mm_model_predict(const struct MmModel *model,
                               const double *image,
                               uint32_t height,
                               uint32_t width,
                               uint8_t *labels);

/**
 * Evaluates `model` on a split of the dataset at `data_dir`.
 *
 * # Safety
 * `model` must be a live handle, `data_dir` a valid NUL-terminated string and
 * `out` NULL or writable.
 */
enum MmStatus mm_evaluate(const struct MmModel *model,
                          const char *data_dir,
                          enum MmSplit split,
                          double tol_frac,
                          struct MmMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKMATCH_H */
