#ifndef CLIPCHAIN_H
#define CLIPCHAIN_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ClipchainStatus {
  CLIPCHAIN_STATUS_OK = 0,
  CLIPCHAIN_STATUS_NULL_POINTER = 1,
  CLIPCHAIN_STATUS_INVALID_STRING = 2,
  CLIPCHAIN_STATUS_CONFIG = 3,
  CLIPCHAIN_STATUS_DATA = 4,
  CLIPCHAIN_STATUS_NUMERIC = 5,
  CLIPCHAIN_STATUS_TRANSPORT = 6,
  CLIPCHAIN_STATUS_BUFFER_TOO_SMALL = 7,
  CLIPCHAIN_STATUS_PANIC = 8,
} ClipchainStatus;

typedef struct ClipchainAutoencoder ClipchainAutoencoder;

typedef struct ClipchainModel ClipchainModel;

/**
 * Generated clips: latents always, pixels if an autoencoder was given.
 */
typedef struct ClipchainVideo ClipchainVideo;

/**
 * Long-video parameters; start from [`clipchain_generate_params_default`].
 */
typedef struct ClipchainGenerateParams {
  size_t clips;
  size_t frames;
  size_t prompt_frames;
  double alpha;
  double beta;
  double guidance;
  size_t steps;
  uint64_t seed;
} ClipchainGenerateParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *clipchain_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *clipchain_version(void);

struct ClipchainGenerateParams clipchain_generate_params_default(void);

/**
 * Loads a denoiser checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ClipchainStatus clipchain_model_load(const char *path, struct ClipchainModel **out);

/**
 * # Safety
 * `model` must come from [`clipchain_model_load`] and not be used afterwards.
 */
void clipchain_model_free(struct ClipchainModel *model);

/**
 * Number of labels the model was trained with.
 *
 * # Safety
 * Pointers must be valid.
 */
enum ClipchainStatus clipchain_model_num_labels(const struct ClipchainModel *model, size_t *out);

/**
 * Copies label `index` (NUL-terminated) into `buf` of `len` bytes.
 *
 * # Safety
 * `buf` must be writable for `len` bytes.
 */
enum ClipchainStatus clipchain_model_label(const struct ClipchainModel *model,
                                           size_t index,
                                           char *buf,
                                           size_t len);

/**
 * Loads an autoencoder checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ClipchainStatus clipchain_autoencoder_load(const char *path,
                                                struct ClipchainAutoencoder **out);

/**
 * # Safety
 * `ae` must come from [`clipchain_autoencoder_load`] and not be used afterwards.
 */
void clipchain_autoencoder_free(struct ClipchainAutoencoder *ae);

/**
 * Generates a long video. `ae` and `label` may be null; a null label
 * picks the model's first label.
 *
 * # Safety
 * Non-null pointers must be valid; `out` must be writable.
 */
enum ClipchainStatus clipchain_generate(const struct ClipchainModel *model,
                                        const struct ClipchainAutoencoder *ae,
                                        const struct ClipchainGenerateParams *params,
                                        const char *label,
                                        struct ClipchainVideo **out);

/**
 * # Safety
 * `video` must come from [`clipchain_generate`] and not be used afterwards.
 */
void clipchain_video_free(struct ClipchainVideo *video);

/**
 * Shape `[clips, frames, channels, height, width]` of the latents
 * (`pixels == 0`) or the decoded pixels (`pixels != 0`).
 *
 * # Safety
 * `shape` must be writable for 5 values.
 */
enum ClipchainStatus clipchain_video_shape(const struct ClipchainVideo *video,
                                           int32_t pixels,
                                           size_t *shape);

/**
 * Copies all clips, in order, as row-major f32 into `buf` of `len` floats.
 *
 * # Safety
 * `buf` must be writable for `len` floats.
 */
enum ClipchainStatus clipchain_video_copy(const struct ClipchainVideo *video,
                                          int32_t pixels,
                                          float *buf,
                                          size_t len);

/**
 * Re-derives the digests of a run directory; `*ok` is 1 if all match.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `ok` writable.
 */
enum ClipchainStatus clipchain_verify_run(const char *dir, int32_t *ok);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLIPCHAIN_H */
