#ifndef SVTRV2_H
#define SVTRV2_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SvtrResize {
  SVTR_RESIZE_MSR = 0,
  SVTR_RESIZE_FIXED32X128 = 1,
  SVTR_RESIZE_FIXED64X256 = 2,
} SvtrResize;

typedef enum SvtrStatus {
  SVTR_STATUS_OK = 0,
  SVTR_STATUS_NULL_POINTER = 1,
  SVTR_STATUS_INVALID_ARGUMENT = 2,
  SVTR_STATUS_IO = 3,
  SVTR_STATUS_FORMAT = 4,
  SVTR_STATUS_CONFIG = 5,
  SVTR_STATUS_BUFFER_TOO_SMALL = 6,
  SVTR_STATUS_INTERNAL = 7,
} SvtrStatus;

/**
 * Opaque recognizer handle.
 */
typedef struct SvtrModel SvtrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint from a NUL-terminated UTF-8 path. Checkpoints that
 * still carry the guidance branch are accepted; it is dropped on load.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum SvtrStatus svtr_model_load(const char *path, struct SvtrModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`svtr_model_load`] and not be used afterwards.
 */
void svtr_model_free(struct SvtrModel *model);

/**
 * Number of characters in the model's charset (blank excluded).
 *
 * # Safety
 * Pointers must be valid.
 */
enum SvtrStatus svtr_model_num_classes(const struct SvtrModel *model, size_t *out);

/**
 * Recognizes one image.
 *
 * `pixels` holds `height * width * channels` values in `[0, 1]`, row-major
 * with interleaved channels; `channels` is 1 or 3. The UTF-8 result plus a
 * NUL terminator is written to `text` (capacity `text_cap` bytes) and its
 * byte length, without the terminator, to `text_len`. When the buffer is
 * too small, `text_len` still receives the needed length and the call
 * returns `SVTR_STATUS_BUFFER_TOO_SMALL`. `confidence` may be null.
 *
 * # Safety
 * `pixels` must point to the stated number of floats and `text` to
 * `text_cap` writable bytes.
 */
enum SvtrStatus svtr_recognize(const struct SvtrModel *model,
                               const float *pixels,
                               size_t height,
                               size_t width,
                               size_t channels,
                               enum SvtrResize resize,
                               char *text,
                               size_t text_cap,
                               size_t *text_len,
                               double *confidence);

/**
 * Copies the calling thread's last error message (NUL-terminated,
 * truncated to fit) and returns its full byte length.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes or be null.
 */
size_t svtr_last_error(char *buf, size_t cap);

/**
 * Static NUL-terminated version string.
 */
const char *svtr_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SVTRV2_H */
