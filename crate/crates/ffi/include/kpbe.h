#ifndef KPBE_H
#define KPBE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum KpbeStatus {
  KPBE_STATUS_OK = 0,
  KPBE_STATUS_NULL_POINTER = 1,
  KPBE_STATUS_INVALID_ARGUMENT = 2,
  KPBE_STATUS_SHAPE_MISMATCH = 3,
  KPBE_STATUS_INVALID_ROTATION = 4,
  KPBE_STATUS_CONFIG = 5,
  KPBE_STATUS_CHECKPOINT = 6,
  KPBE_STATUS_IO = 7,
  KPBE_STATUS_FRAMES = 8,
  KPBE_STATUS_CONTRACT = 9,
  KPBE_STATUS_NON_FINITE_LOSS = 10,
  KPBE_STATUS_END_OF_STREAM = 11,
  KPBE_STATUS_BUFFER_TOO_SMALL = 12,
  KPBE_STATUS_PANIC = 13,
} KpbeStatus;

/**
 * A loaded or freshly initialized model.
 */
typedef struct KpbeModel KpbeModel;

/**
 * A source image encoded once (appearance, canonical keypoints, source
 * pose and expression), ready to drive many frames.
 */
typedef struct KpbeSource KpbeSource;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *kpbe_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kpbe_version(void);

/**
 * Creates a model with the default configuration and seeded random weights.
 *
 * # Safety
 * `out` must be a valid pointer to a writable handle slot.
 */
enum KpbeStatus kpbe_model_new(uint64_t seed, struct KpbeModel **out);

/**
 * Loads the model stored in a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a writable handle slot.
 */
enum KpbeStatus kpbe_model_load(const char *path, struct KpbeModel **out);

/**
 * Frees a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void kpbe_model_free(struct KpbeModel *model);

/**
 * Side length of the square images the model works at, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t kpbe_model_resolution(const struct KpbeModel *model);

/**
 * Encodes a source image. Images of another size are resized.
 *
 * # Safety
 * `model` must be live, `rgb` must hold `height * width * 3` bytes and
 * `out` must be a writable handle slot.
 */
enum KpbeStatus kpbe_source_new(const struct KpbeModel *model,
                                const uint8_t *rgb,
                                size_t height,
                                size_t width,
                                struct KpbeSource **out);

/**
 * Frees an encoded source. NULL is ignored.
 *
 * # Safety
 * `source` must come from this library and not be used afterwards.
 */
void kpbe_source_free(struct KpbeSource *source);

/**
 * Synthesizes one frame: expression from the backend frame, head pose from
 * the pose-driving frame. Both inputs are `height x width` RGB; the output
 * is written at the model resolution (`resolution * resolution * 3` bytes).
 *
 * # Safety
 * `source` must be live; the input buffers must hold `height * width * 3`
 * bytes and `out_rgb` must hold `out_len` bytes.
 */
enum KpbeStatus kpbe_enhance_frame(const struct KpbeSource *source,
                                   const uint8_t *backend_rgb,
                                   const uint8_t *driver_rgb,
                                   size_t height,
                                   size_t width,
                                   uint8_t *out_rgb,
                                   size_t out_len);

/**
 * Synthesizes one frame under a user head pose: `rotation` is a row-major
 * 3x3 matrix (must be orthonormal), `translation` three components in
 * `[-1, 1]`. The rotation is checked before any synthesis.
 *
 * # Safety
 * `source` must be live; `rotation` must point to 9 doubles and
 * `translation` to 3; buffers as in [`kpbe_enhance_frame`].
 */
enum KpbeStatus kpbe_reenact_frame(const struct KpbeSource *source,
                                   const uint8_t *backend_rgb,
                                   size_t height,
                                   size_t width,
                                   const double *rotation,
                                   const double *translation,
                                   uint8_t *out_rgb,
                                   size_t out_len);

/**
 * PSNR in dB between two RGB images. Identical images set `*identical`
 * to 1 and `*db` to infinity.
 *
 * # Safety
 * Both buffers must hold `height * width * 3` bytes; `db` and `identical`
 * must be writable.
 */
enum KpbeStatus kpbe_psnr(const uint8_t *a,
                          const uint8_t *b,
                          size_t height,
                          size_t width,
                          double *db,
                          int32_t *identical);

/**
 * Mean SSIM between two RGB images of at least 11x11 pixels.
 *
 * # Safety
 * Both buffers must hold `height * width * 3` bytes; `out` must be
 * writable.
 */
enum KpbeStatus kpbe_ssim(const uint8_t *a,
                          const uint8_t *b,
                          size_t height,
                          size_t width,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KPBE_H */
