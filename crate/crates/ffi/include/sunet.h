#ifndef SUNET_H
#define SUNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Codes 2 to 4 match the exit codes of the `sunet` command.
 */
typedef enum SunetStatus {
  SUNET_STATUS_OK = 0,
  /**
   * Bad configuration, argument or shape.
   */
  SUNET_STATUS_INVALID_ARGUMENT = 2,
  /**
   * File access, parse or join failure.
   */
  SUNET_STATUS_DATA = 3,
  SUNET_STATUS_NUMERICAL = 4,
  SUNET_STATUS_NULL_POINTER = 5,
  SUNET_STATUS_PANIC = 6,
} SunetStatus;

/**
 * Opaque model handle.
 */
typedef struct SunetModelHandle SunetModelHandle;

/**
 * `laterality`: 0 none, 1 left, 2 right. `location`: 0 none, 1 upper, 2 lower.
 */
typedef struct SunetRegionStats {
  uint8_t present;
  uint64_t area;
  double eccentricity;
  uint8_t laterality;
  uint8_t location;
} SunetRegionStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *sunet_last_error(void);

/**
 * Loads a model directory written by `sunet train`.
 *
 * # Safety
 * `dir` must be a nul-terminated string and `out` a writable pointer.
 */
enum SunetStatus sunet_model_load(const char *dir, struct SunetModelHandle **out);

/**
 * # Safety
 * `handle` must come from [`sunet_model_load`] and not be used afterwards.
 * Null is accepted.
 */
void sunet_model_free(struct SunetModelHandle *handle);

/**
 * Input height and width the model was built for, and its sentence length
 * (0 for a model without a channel).
 *
 * # Safety
 * `handle` must be live; the out pointers must be writable.
 */
enum SunetStatus sunet_model_info(const struct SunetModelHandle *handle,
                                  size_t *height,
                                  size_t *width,
                                  size_t *sentence_length);

/**
 * Segments one `height * width` image (row-major, values in [0, 1]).
 * Writes the post-processed 0/1 mask into `mask_out` and, when the model
 * has a channel and `ids_out` is not null, the emitted symbol ids into
 * `ids_out`, which must hold `ids_len` >= the sentence length.
 *
 * # Safety
 * Buffers must be valid for the given lengths.
 */
enum SunetStatus sunet_model_predict(const struct SunetModelHandle *handle,
                                     const double *image,
                                     size_t height,
                                     size_t width,
                                     uint8_t *mask_out,
                                     uint32_t *ids_out,
                                     size_t ids_len);

/**
 * Region statistics of a 0/1 mask.
 *
 * # Safety
 * `mask` must hold `height * width` bytes; `out` must be writable.
 */
enum SunetStatus sunet_region_stats(const uint8_t *mask,
                                    size_t height,
                                    size_t width,
                                    struct SunetRegionStats *out);

/**
 * Dice coefficient of two 0/1 masks of `len` bytes; 1 when both are empty.
 *
 * # Safety
 * `a` and `b` must hold `len` bytes; `out` must be writable.
 */
enum SunetStatus sunet_dsc(const uint8_t *a, const uint8_t *b, size_t len, double *out);

/**
 * `softmax((log p + g) / tau)` over `len` entries.
 *
 * # Safety
 * `p`, `g` and `out` must hold `len` values.
 */
enum SunetStatus sunet_gumbel_softmax(const double *p,
                                      const double *g,
                                      size_t len,
                                      double tau,
                                      double *out);

/**
 * Runs the symbol analysis on a sentence log and stats.csv, writing
 * `table2.csv` and `patterns.txt` into `out_dir`.
 *
 * # Safety
 * The paths must be nul-terminated strings.
 */
enum SunetStatus sunet_analyze_files(const char *sentences,
                                     const char *stats,
                                     const char *out_dir,
                                     size_t min_count,
                                     size_t max_k,
                                     double min_coverage);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUNET_H */
