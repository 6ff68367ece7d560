#ifndef OBJECT_NOVELTY_H
#define OBJECT_NOVELTY_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum OnStatus {
  ON_STATUS_OK = 0,
  ON_STATUS_NULL_POINTER = 1,
  ON_STATUS_INVALID_ARGUMENT = 2,
  ON_STATUS_CONFIG = 3,
  ON_STATUS_RANGE = 4,
  ON_STATUS_NUMERICAL_FAILURE = 5,
  ON_STATUS_UNDEFINED_METRIC = 6,
  ON_STATUS_IO = 7,
  ON_STATUS_UNSUPPORTED_ARCHITECTURE = 8,
  ON_STATUS_INTERNAL = 9,
} OnStatus;

/**
 * A loaded teacher/student pair and the scoring configuration.
 */
typedef struct OnScorer OnScorer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Opens a scorer from a TOML run configuration, a teacher checkpoint (plain
 * backbone or stage-1 file) and a student checkpoint.
 *
 * # Safety
 * The path arguments must be valid NUL-terminated strings and `out` a
 * valid pointer.
 */
enum OnStatus on_scorer_open(const char *config_path,
                             const char *teacher_path,
                             const char *student_path,
                             struct OnScorer **out);

/**
 * Releases a scorer. Null is ignored.
 *
 * # Safety
 * `scorer` must come from [`on_scorer_open`] and not be used afterwards.
 */
void on_scorer_free(struct OnScorer *scorer);

/**
 * Input side length the scorer expects.
 *
 * # Safety
 * `scorer` must be a live handle or null.
 */
size_t on_scorer_image_size(const struct OnScorer *scorer);

/**
 * Scores `batch` normalized CHW float images of `height × width` and
 * writes one novelty score per image to `out_scores`.
 *
 * # Safety
 * `pixels` must hold `batch * 3 * height * width` floats and `out_scores`
 * room for `batch` doubles.
 */
enum OnStatus on_scorer_score(const struct OnScorer *scorer,
                              const float *pixels,
                              size_t batch,
                              size_t height,
                              size_t width,
                              double *out_scores);

/**
 * Loads, resizes and normalizes an image file, then scores it.
 *
 * # Safety
 * `image_path` must be a valid NUL-terminated string and `out_score` a
 * valid pointer.
 */
enum OnStatus on_scorer_score_file(const struct OnScorer *scorer,
                                   const char *image_path,
                                   double *out_score);

/**
 * Rank-based AUROC; `labels[i]` is nonzero for abnormal samples.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be valid.
 */
enum OnStatus on_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Balanced soft assignment of a row-major `rows × cols` score matrix.
 * Writes the row-stochastic result into `out_q` (same shape) and the final
 * column residual into `out_residual` when it is not null.
 *
 * # Safety
 * `scores` and `out_q` must hold `rows * cols` doubles.
 */
enum OnStatus on_sinkhorn(const double *scores,
                          size_t rows,
                          size_t cols,
                          uint32_t iterations,
                          double epsilon,
                          double *out_q,
                          double *out_residual);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must have room for `len` bytes, or be null.
 */
size_t on_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *on_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OBJECT_NOVELTY_H */
