#ifndef OCLIP_H
#define OCLIP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OclipStatus {
  OCLIP_STATUS_OK = 0,
  OCLIP_STATUS_NULL_POINTER = 1,
  OCLIP_STATUS_INVALID_ARGUMENT = 2,
  OCLIP_STATUS_IO = 3,
  OCLIP_STATUS_FORMAT = 4,
  OCLIP_STATUS_VERSION = 5,
  OCLIP_STATUS_TRUNCATED = 6,
  OCLIP_STATUS_SHAPE_MISMATCH = 7,
  OCLIP_STATUS_DIVERGENCE = 8,
  OCLIP_STATUS_CONTRACT = 9,
  OCLIP_STATUS_PANIC = 10,
} OclipStatus;

/**
 * Loaded model parameters.
 */
typedef struct OclipModel OclipModel;

typedef struct OclipFilterSummary {
  size_t kept;
  size_t dropped;
  size_t malformed;
  size_t images_kept;
  size_t images_dropped;
} OclipFilterSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t oclip_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum OclipStatus oclip_model_load(const char *path, struct OclipModel **out);

/**
 * Freshly initialized default model for the given canvas size.
 *
 * # Safety
 * `out` must be writable.
 */
enum OclipStatus oclip_model_init(uint64_t seed, size_t image_size, struct OclipModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, not yet freed.
 */
void oclip_model_free(struct OclipModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t oclip_model_vocab_size(const struct OclipModel *model);

/**
 * Side length in pixels of the square images the model expects.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t oclip_model_image_size(const struct OclipModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t oclip_model_embed_dim(const struct OclipModel *model);

/**
 * Masks character `mask_pos` of `text` and predicts it from the image.
 * `pixels` holds `image_size * image_size` gray values in [0, 1]. The
 * prediction is written as a Unicode scalar value, or 0 for PAD/MASK.
 *
 * # Safety
 * Pointers must be valid; `pixels` must hold `n_pixels` values.
 */
enum OclipStatus oclip_predict_masked(const struct OclipModel *model,
                                      const double *pixels,
                                      size_t n_pixels,
                                      const char *text,
                                      size_t mask_pos,
                                      uint32_t *out_symbol);

/**
 * Unit-norm image vector and text-set vector (unmasked texts) used by the
 * contrastive loss. Both outputs need `oclip_model_embed_dim` slots.
 *
 * # Safety
 * `texts` must point to `n_texts` NUL-terminated strings; outputs must be
 * writable for the embedding dimension.
 */
enum OclipStatus oclip_embed(const struct OclipModel *model,
                             const double *pixels,
                             size_t n_pixels,
                             const char *const *texts,
                             size_t n_texts,
                             double *image_vec,
                             double *text_vec);

/**
 * Cosine-decayed learning rate at `step` of `total_steps`.
 *
 * # Safety
 * `out` must be writable.
 */
enum OclipStatus oclip_cosine_lr(size_t step,
                                 size_t total_steps,
                                 double lr_init,
                                 double lr_min,
                                 double *out);

/**
 * Renders `count` samples with default generator settings at
 * `image_size` and writes the corpus file. The FNV-1a digest of the file
 * bytes goes to `out_digest` when it is not null.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum OclipStatus oclip_generate_corpus(uint64_t seed,
                                       size_t count,
                                       size_t image_size,
                                       const char *path,
                                       uint64_t *out_digest);

/**
 * Filters a manifest file by detection and recognition confidence.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `summary` null or writable.
 */
enum OclipStatus oclip_filter_manifest(const char *in_path,
                                       const char *out_path,
                                       double det_thresh,
                                       double rec_thresh,
                                       struct OclipFilterSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OCLIP_H */
