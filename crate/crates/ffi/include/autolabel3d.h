#ifndef AUTOLABEL3D_H
#define AUTOLABEL3D_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Row of `al3d_annotate_frame`: object index, ok flag (1 or 0), cx, cy, cz, h, w, l,
 * heading, agreement IoU. Failed rows carry NaN geometry.
 */
#define AL3D_LABEL_STRIDE 10

/**
 * 2D box row: x1, y1, x2, y2.
 */
#define AL3D_BOX2D_STRIDE 4

/**
 * Row of `al3d_eval_losses_2d` output: plain 2D loss, normalized 2D loss, configured 2D loss.
 */
#define AL3D_LOSS2D_STRIDE 3

/**
 * 3D prediction row: cx, cy, cz, h, w, l, 12 heading logits, 12 heading residuals.
 */
#define AL3D_PRED3D_STRIDE 30

/**
 * 3D ground-truth row: cx, cy, cz, h, w, l, heading.
 */
#define AL3D_BOX3D_STRIDE 7

/**
 * Row of `al3d_eval_losses_3d` output: center, size, heading bin, heading residual, weighted total.
 */
#define AL3D_LOSS3D_STRIDE 5

typedef enum {
  AL3D_STATUS_OK = 0,
  AL3D_STATUS_NULL_POINTER = 1,
  AL3D_STATUS_INVALID_HANDLE = 2,
  AL3D_STATUS_INVALID_ARGUMENT = 3,
  AL3D_STATUS_UTF8 = 4,
  AL3D_STATUS_CONFIG = 5,
  AL3D_STATUS_DATASET = 6,
  AL3D_STATUS_ANNOTATION = 7,
  AL3D_STATUS_LOSS = 8,
  AL3D_STATUS_PIPELINE = 9,
  AL3D_STATUS_BUFFER_TOO_SMALL = 10,
  AL3D_STATUS_PANIC = 11,
} Al3dStatus;

/**
 * Opaque dataset handle. Zero is never a valid handle.
 */
typedef uint64_t Al3dHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL terminated and truncated to
 * `capacity`. Returns the size needed including the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `capacity` bytes.
 */
size_t al3d_last_error_message(char *buf, size_t capacity);

/**
 * Loads a dataset. `root` null means the configured root, or the synthetic corpus
 * when none is configured. `config_toml` null means defaults.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
Al3dStatus al3d_load_dataset(const char *root, const char *config_toml, Al3dHandle *out);

/**
 * # Safety
 * `out` must be writable.
 */
Al3dStatus al3d_num_frames(Al3dHandle h, size_t *out);

/**
 * Writes frame ids in dataset order. `out_len` always receives the count; the ids are
 * written only if `capacity` suffices.
 *
 * # Safety
 * `ids` must be valid for `capacity` elements; `out_len` must be writable.
 */
Al3dStatus al3d_frame_ids(Al3dHandle h, uint32_t *ids, size_t capacity, size_t *out_len);

/**
 * Annotates every weak label of a frame with the direct optimizer and writes one
 * `AL3D_LABEL_STRIDE` row per label. `out_count` always receives the row count.
 *
 * # Safety
 * `rows` must be valid for `capacity * AL3D_LABEL_STRIDE` doubles; `out_count` must be writable.
 */
Al3dStatus al3d_annotate_frame(Al3dHandle h,
                               uint32_t frame_id,
                               double *rows,
                               size_t capacity,
                               size_t *out_count);

/**
 * As `al3d_annotate_frame`, rendered as a KITTI label file exactly as `export`
 * writes it. `out_len` receives the size needed including the NUL terminator.
 *
 * # Safety
 * `buf` must be valid for `capacity` bytes; `out_len` must be writable.
 */
Al3dStatus al3d_annotate_frame_text(Al3dHandle h,
                                    uint32_t frame_id,
                                    char *buf,
                                    size_t capacity,
                                    size_t *out_len);

/**
 * Per-row 2D box losses between `n` predicted and ground-truth boxes
 * (`AL3D_BOX2D_STRIDE` each), written as `AL3D_LOSS2D_STRIDE` rows.
 *
 * # Safety
 * `pred` and `gt` must hold `n * AL3D_BOX2D_STRIDE` doubles; `out` must hold `n * AL3D_LOSS2D_STRIDE`.
 */
Al3dStatus al3d_eval_losses_2d(const double *pred,
                               const double *gt,
                               size_t n,
                               const char *config_toml,
                               double *out);

/**
 * Per-row 3D box losses between `n` predictions (`AL3D_PRED3D_STRIDE`) and
 * ground-truth boxes (`AL3D_BOX3D_STRIDE`), written as `AL3D_LOSS3D_STRIDE` rows.
 *
 * # Safety
 * Buffers must hold `n` rows of their respective strides.
 */
Al3dStatus al3d_eval_losses_3d(const double *pred,
                               const double *gt,
                               size_t n,
                               const char *config_toml,
                               double *out);

/**
 * Runs the full pipeline on the handle's dataset and writes `label_2/` and
 * `manifest.toml` under `out_dir`, as the command-line `run` does.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
Al3dStatus al3d_export(Al3dHandle h, const char *out_dir);

/**
 * Releases a handle. Unknown and already closed handles are ignored.
 */
Al3dStatus al3d_close(Al3dHandle h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTOLABEL3D_H */
