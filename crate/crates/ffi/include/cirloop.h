#ifndef CIRLOOP_H
#define CIRLOOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CirloopStatus {
  CIRLOOP_STATUS_OK = 0,
  CIRLOOP_STATUS_NULL_POINTER = 1,
  CIRLOOP_STATUS_INVALID_ARGUMENT = 2,
  CIRLOOP_STATUS_IO = 3,
  CIRLOOP_STATUS_FORMAT = 4,
  CIRLOOP_STATUS_NOT_FOUND = 5,
  CIRLOOP_STATUS_CONFIG = 6,
  CIRLOOP_STATUS_INTERNAL = 7,
} CirloopStatus;

/**
 * Gallery file encodings accepted by [`cirloop_gallery_load`].
 */
typedef enum CirloopFormat {
  /**
   * Chosen from the file extension.
   */
  CIRLOOP_FORMAT_AUTO = 0,
  CIRLOOP_FORMAT_BINARY = 1,
  CIRLOOP_FORMAT_JSONL = 2,
} CirloopFormat;

/**
 * A loaded embedding gallery.
 */
typedef struct CirloopGallery CirloopGallery;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library and valid until the next call on the same thread.
 */
const char *cirloop_last_error(void);

/**
 * Library version, static.
 */
const char *cirloop_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed once.
 */
void cirloop_string_free(char *s);

/**
 * Loads a gallery file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CirloopStatus cirloop_gallery_load(const char *path,
                                        enum CirloopFormat format,
                                        struct CirloopGallery **out);

/**
 * # Safety
 * `g` must be null or a handle from [`cirloop_gallery_load`], freed once.
 */
void cirloop_gallery_free(struct CirloopGallery *g);

/**
 * Number of entries, 0 for a null handle.
 *
 * # Safety
 * `g` must be null or a live gallery handle.
 */
size_t cirloop_gallery_len(const struct CirloopGallery *g);

/**
 * Embedding dimension, 0 for a null handle.
 *
 * # Safety
 * `g` must be null or a live gallery handle.
 */
size_t cirloop_gallery_dim(const struct CirloopGallery *g);

/**
 * Image id of entry `index` as a new string (free with
 * [`cirloop_string_free`]), or null when out of range.
 *
 * # Safety
 * `g` must be null or a live gallery handle.
 */
char *cirloop_gallery_image_id(const struct CirloopGallery *g, size_t index);

/**
 * Ranks the gallery by cosine similarity to `query` (normalized here) and
 * writes the best `k` entry indices and scores, best first, ties by id.
 * `*written` receives min(k, len).
 *
 * # Safety
 * `query` must point to `dim` floats; `out_indices` and `out_scores` to
 * room for `k` values each (`out_scores` may be null).
 */
enum CirloopStatus cirloop_rank(const struct CirloopGallery *g,
                                const float *query,
                                size_t dim,
                                size_t k,
                                uint32_t *out_indices,
                                double *out_scores,
                                size_t *written);

/**
 * Mean of `count` row-major vectors of `dim` floats, renormalized, into `out`.
 *
 * # Safety
 * `vectors` must point to `count * dim` floats and `out` to `dim`.
 */
enum CirloopStatus cirloop_fuse_history(const float *vectors, size_t count, size_t dim, float *out);

/**
 * Hits@K at `round` in percent. `ranks` holds every session's 1-based
 * target ranks back to back; `lengths[i]` is session i's round count.
 *
 * # Safety
 * `lengths` must hold `sessions` values and `ranks` their sum.
 */
enum CirloopStatus cirloop_hits_at_k(const size_t *ranks,
                                     const size_t *lengths,
                                     size_t sessions,
                                     size_t k,
                                     size_t round,
                                     double *out);

/**
 * Recall@K at `round` in percent; same layout as [`cirloop_hits_at_k`].
 *
 * # Safety
 * As for [`cirloop_hits_at_k`].
 */
enum CirloopStatus cirloop_recall_at_k(const size_t *ranks,
                                       const size_t *lengths,
                                       size_t sessions,
                                       size_t k,
                                       size_t round,
                                       double *out);

/**
 * Runs the evaluation described by a TOML run config and stores the report
 * JSON in `*out_json` (free with [`cirloop_string_free`]). Nothing is
 * written to disk.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string and `out_json` valid.
 */
enum CirloopStatus cirloop_eval(const char *config_path, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CIRLOOP_H */
