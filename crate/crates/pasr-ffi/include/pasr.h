#ifndef PASR_H
#define PASR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum PasrStatus {
  PasrStatus_Ok = 0,
  PasrStatus_NullArgument = 1,
  PasrStatus_InvalidArgument = 2,
  PasrStatus_BufferTooSmall = 3,
  PasrStatus_IoError = 4,
  PasrStatus_BadCheckpoint = 5,
  PasrStatus_InternalError = 6,
} PasrStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct PasrModel PasrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Encode a coordinate as a geohash string of `length` characters into
 * `out` (NUL-terminated). `out_len` is the capacity of `out` in
 * bytes; it must be at least `length + 1`.
 *
 * # Safety
 * `out` must point to writable memory of at least `out_len` bytes.
 */
enum PasrStatus pasr_geohash_encode(double lat,
                                    double lon,
                                    uintptr_t length,
                                    char *out,
                                    uintptr_t out_len);

/**
 * Decode a geohash into its cell bounds.
 *
 * # Safety
 * `hash` must be a NUL-terminated string; the out pointers must be
 * valid for writes.
 */
enum PasrStatus pasr_geohash_decode(const char *hash,
                                    double *lat_min,
                                    double *lat_max,
                                    double *lon_min,
                                    double *lon_max);

/**
 * Load a model checkpoint. Returns null on failure; inspect the
 * status through `pasr_model_load_status` style calls is deliberately
 * avoided — the checkpoint either loads fully or not at all.
 *
 * # Safety
 * `path` must be a NUL-terminated file path.
 */
struct PasrModel *pasr_model_load(const char *path);

/**
 * Release a model handle. Null is accepted and ignored.
 *
 * # Safety
 * `model` must have come from `pasr_model_load` and not been freed.
 */
void pasr_model_free(struct PasrModel *model);

/**
 * Number of locations the model was trained over, or 0 for null.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint64_t pasr_model_num_locations(const struct PasrModel *model);

/**
 * Rank `candidates` against a visit history. Location ids are the
 * 1-based ids of the training dataset. On success `out_ids` holds the
 * candidate ids in descending score order and `out_scores` the
 * matching scores; both must have room for `num_candidates` entries.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum PasrStatus pasr_model_rank(const struct PasrModel *model,
                                const uint64_t *history,
                                uintptr_t history_len,
                                const uint64_t *candidates,
                                uintptr_t num_candidates,
                                uint64_t *out_ids,
                                double *out_scores);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PASR_H */
