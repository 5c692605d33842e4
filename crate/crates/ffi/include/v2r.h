#ifndef V2R_H
#define V2R_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum V2rMetric {
  V2R_METRIC_COSINE = 0,
  V2R_METRIC_L2 = 1,
} V2rMetric;

/**
 * Result codes. Values 2..=11 match the `v2r` binary's exit codes.
 */
typedef enum V2rStatus {
  V2R_STATUS_OK = 0,
  V2R_STATUS_NULL_POINTER = 1,
  V2R_STATUS_INVALID_ARGUMENT = 2,
  V2R_STATUS_IO = 3,
  V2R_STATUS_REGISTRY = 4,
  V2R_STATUS_EXECUTOR = 5,
  V2R_STATUS_PROFILER = 6,
  V2R_STATUS_ORCHESTRATOR = 7,
  V2R_STATUS_DATA_ENGINE = 8,
  V2R_STATUS_SERVER = 9,
  V2R_STATUS_MATCHING = 10,
  V2R_STATUS_MONITOR = 11,
  V2R_STATUS_BUFFER_TOO_SMALL = 12,
  V2R_STATUS_PANIC = 13,
} V2rStatus;

/**
 * Opaque exact similarity index.
 */
typedef struct V2rIndex V2rIndex;

/**
 * One detected shot; frame indices are inclusive.
 */
typedef struct V2rShot {
  uint32_t start_frame;
  uint32_t end_frame;
  uint32_t keyframe;
} V2rShot;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *v2r_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t v2r_last_error_message(char *buf, size_t len);

/**
 * Creates an empty index with `metric` one of [`V2rMetric`]'s values.
 * Free it with [`v2r_index_free`].
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum V2rStatus v2r_index_new(uint32_t dim, uint32_t metric, struct V2rIndex **out);

/**
 * Releases an index. Null is ignored.
 *
 * # Safety
 * `index` must be null or a handle from this library not yet freed.
 */
void v2r_index_free(struct V2rIndex *index);

/**
 * Number of stored vectors, 0 for a null handle.
 *
 * # Safety
 * `index` must be null or a live handle.
 */
size_t v2r_index_len(const struct V2rIndex *index);

/**
 * Adds `count` vectors stored row-major in `values` (`count × dim` floats).
 * All-or-nothing: on error the index is unchanged.
 *
 * # Safety
 * `ids` must hold `count` u64s and `values` `count × dim` floats.
 */
enum V2rStatus v2r_index_add(struct V2rIndex *index,
                             const uint64_t *ids,
                             const float *values,
                             size_t count);

/**
 * Exact top-`k` search. Writes up to `k` results to `out_ids` and
 * `out_scores` and the number written to `out_count`.
 *
 * # Safety
 * `query` must hold `dim` floats (the index dimension); the output arrays
 * must each hold `k` elements.
 */
enum V2rStatus v2r_index_search(const struct V2rIndex *index,
                                const float *query,
                                size_t k,
                                uint64_t *out_ids,
                                float *out_scores,
                                size_t *out_count);

/**
 * Saves the index in the HYIX format.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string.
 */
enum V2rStatus v2r_index_save(const struct V2rIndex *index, const char *path);

/**
 * Loads an HYIX file into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` writable.
 */
enum V2rStatus v2r_index_load(const char *path, struct V2rIndex **out);

/**
 * Histogram embedding of an `h × w × 3` u8 image into `dim` floats.
 *
 * # Safety
 * `image` must hold `h·w·3` bytes and `out` `dim` floats.
 */
enum V2rStatus v2r_embed_histogram(const uint8_t *image,
                                   uint32_t h,
                                   uint32_t w,
                                   uint64_t seed,
                                   uint32_t dim,
                                   float *out);

/**
 * Detects shots in an HYF stream. At most `capacity` shots are written;
 * `out_count` always receives the total, and `BufferTooSmall` is returned
 * when it exceeds `capacity`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out_shots` must hold `capacity` shots
 * (may be null when `capacity` is 0).
 */
enum V2rStatus v2r_detect_shots(const char *path,
                                float threshold,
                                uint32_t min_shot_len,
                                struct V2rShot *out_shots,
                                size_t capacity,
                                size_t *out_count);

/**
 * Nearest-rank percentile of `n` samples, `p` in (0, 1].
 *
 * # Safety
 * `samples` must hold `n` floats; `out` must be writable.
 */
enum V2rStatus v2r_percentile(const float *samples, size_t n, float p, float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* V2R_H */
