#ifndef ELREA_H
#define ELREA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ElreaStatus {
  ELREA_STATUS_OK = 0,
  ELREA_STATUS_NULL_POINTER = 1,
  ELREA_STATUS_INVALID_ARGUMENT = 2,
  ELREA_STATUS_IO = 3,
  ELREA_STATUS_CONFIG = 4,
  ELREA_STATUS_DIMENSION = 5,
  ELREA_STATUS_WEIGHTS = 6,
  ELREA_STATUS_CHECKPOINT = 7,
  ELREA_STATUS_MISSING_STAGE = 8,
  ELREA_STATUS_HASH_MISMATCH = 9,
  ELREA_STATUS_PANIC = 10,
  ELREA_STATUS_OTHER = 11,
} ElreaStatus;

/**
 * A finished run opened for inference.
 */
typedef struct ElreaModel ElreaModel;

/**
 * Projection matrix generator for one seed and shape.
 */
typedef struct ElreaProjector ElreaProjector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a
 * successful call. Valid until the next call on the same thread.
 */
const char *elrea_last_error_message(void);

/**
 * Routing weights for one direction against `n_clusters` centroids, each
 * `dim` long and stored row by row. Inputs are normalized here. A zero
 * direction gets uniform cluster weights and a base weight of 1.
 *
 * # Safety
 * `direction` holds `dim` values, `centroids` holds `n_clusters * dim`,
 * `weights_out` has room for `n_clusters` and `base_out` for one.
 */
enum ElreaStatus elrea_route(const double *direction,
                             size_t dim,
                             const double *centroids,
                             size_t n_clusters,
                             double *weights_out,
                             double *base_out);

/**
 * Argmax of the weighted sum of `n_rows` logit rows of length `vocab`
 * (ties to the lowest id).
 *
 * # Safety
 * `logits` holds `n_rows * vocab` values and `weights` holds `n_rows`.
 */
enum ElreaStatus elrea_ensemble_next_token(const double *logits,
                                           size_t n_rows,
                                           size_t vocab,
                                           const double *weights,
                                           uint32_t *token_out);

/**
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum ElreaStatus elrea_projector_new(uint64_t seed,
                                     size_t source_dim,
                                     size_t d_proj,
                                     struct ElreaProjector **out);

/**
 * Projects `n_rows` rows of `source_dim` values; writes `n_rows * d_proj`.
 *
 * # Safety
 * `p` comes from `elrea_projector_new`; buffers have the stated sizes.
 */
enum ElreaStatus elrea_projector_project(const struct ElreaProjector *p,
                                         const double *rows,
                                         size_t n_rows,
                                         double *out);

/**
 * # Safety
 * `p` is null or came from `elrea_projector_new` and is not used again.
 */
void elrea_projector_free(struct ElreaProjector *p);

/**
 * Opens a finished run. `config_path` may be null for the default
 * configuration; `run_dir`, when not null, replaces the configured one.
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is a valid slot.
 */
enum ElreaStatus elrea_model_open(const char *config_path,
                                  const char *run_dir,
                                  struct ElreaModel **out);

/**
 * Number of experts C; routing outputs hold this many cluster weights.
 *
 * # Safety
 * `m` is null or a live handle.
 */
size_t elrea_model_n_experts(const struct ElreaModel *m);

/**
 * # Safety
 * `m` is a live handle, `instruction` is NUL-terminated, `weights_out`
 * has room for `elrea_model_n_experts(m)` values.
 */
enum ElreaStatus elrea_model_route(const struct ElreaModel *m,
                                   const char *instruction,
                                   double *weights_out,
                                   double *base_out);

/**
 * Routes and decodes `instruction`. `top_k` of 0 keeps every expert.
 * The generated text is returned in `text_out` and must be released with
 * `elrea_string_free`.
 *
 * # Safety
 * `m` is a live handle, `instruction` is NUL-terminated, `text_out` is a
 * valid slot.
 */
enum ElreaStatus elrea_model_generate(const struct ElreaModel *m,
                                      const char *instruction,
                                      size_t top_k,
                                      char **text_out);

/**
 * # Safety
 * `m` is null or a live handle that is not used again.
 */
void elrea_model_free(struct ElreaModel *m);

/**
 * # Safety
 * `s` is null or a string returned by this library, not yet freed.
 */
void elrea_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ELREA_H */
