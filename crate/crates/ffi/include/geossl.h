#ifndef GEOSSL_H
#define GEOSSL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; the non-zero values match the command-line exit codes.
 */
typedef enum GeosslStatus {
  GEOSSL_STATUS_OK = 0,
  GEOSSL_STATUS_INTERNAL = 1,
  GEOSSL_STATUS_CONFIG = 2,
  GEOSSL_STATUS_DATA = 3,
  GEOSSL_STATUS_NUMERIC = 4,
  /**
   * A null pointer, a bad string or an undersized output buffer.
   */
  GEOSSL_STATUS_INVALID_ARGUMENT = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  GEOSSL_STATUS_PANIC = 6,
} GeosslStatus;

/**
 * Opaque handle to a frozen backbone.
 */
typedef struct GeosslModel GeosslModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *geossl_last_error(void);

/**
 * Loads the teacher backbone of a checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GeosslStatus geossl_model_load(const char *path, struct GeosslModel **out);

/**
 * Releases a handle from [`geossl_model_load`]; null is ignored.
 *
 * # Safety
 * `model` must come from [`geossl_model_load`] and not be used afterwards.
 */
void geossl_model_free(struct GeosslModel *model);

/**
 * Embedding width of the backbone, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t geossl_model_embed_dim(const struct GeosslModel *model);

/**
 * Patch side length of the backbone, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t geossl_model_patch_size(const struct GeosslModel *model);

/**
 * Learnable parameter count of the backbone, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint64_t geossl_model_param_count(const struct GeosslModel *model);

/**
 * Parameter count of a named size (`small` … `giant`) at 224-pixel input.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GeosslStatus geossl_param_count_named(const char *name, uint64_t *out);

/**
 * Class-token features of `count` images into `out` (`count × embed_dim`,
 * row-major).
 *
 * # Safety
 * `rgb` must hold `count × side × side × 3` floats and `out` at least
 * `out_len` doubles.
 */
enum GeosslStatus geossl_model_class_features(const struct GeosslModel *model,
                                              const float *rgb,
                                              size_t count,
                                              size_t side,
                                              double *out,
                                              size_t out_len);

/**
 * Patch-token features of one image into `out` (`(side/patch)² ×
 * embed_dim`, raster order).
 *
 * # Safety
 * `rgb` must hold `side × side × 3` floats and `out` at least `out_len`
 * doubles.
 */
enum GeosslStatus geossl_model_patch_features(const struct GeosslModel *model,
                                              const float *rgb,
                                              size_t side,
                                              double *out,
                                              size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOSSL_H */
