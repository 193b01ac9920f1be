#ifndef POSEADAPT_H
#define POSEADAPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 3 to 5 match the command-line exit codes.
 */
typedef enum PaStatus {
  PA_STATUS_OK = 0,
  PA_STATUS_NULL_POINTER = 1,
  PA_STATUS_INVALID_ARGUMENT = 2,
  PA_STATUS_IO = 3,
  PA_STATUS_CONFIG = 4,
  PA_STATUS_NUMERIC = 5,
  PA_STATUS_PANIC = 6,
} PaStatus;

/**
 * Loaded checkpoint ready for single-image inference.
 */
typedef struct PaModel PaModel;

/**
 * Camera-to-world pose: translation in metres and a unit quaternion
 * `(w, x, y, z)` with `w >= 0`.
 */
typedef struct PaPose {
  double t[3];
  double q[4];
} PaPose;

/**
 * Whole-network costs for a batch of one.
 */
typedef struct PaCostSummary {
  uint64_t flops;
  uint64_t params;
  uint64_t activations;
  uint64_t bytes;
} PaCostSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pa_version(void);

/**
 * Length in bytes of the last error message on this thread, without the
 * terminating NUL.
 */
size_t pa_last_error_length(void);

/**
 * Copies the last error message into `buf` (truncated to `len - 1` bytes
 * and NUL-terminated). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t pa_last_error_message(char *buf, size_t len);

/**
 * Loads a checkpoint file. On success `*out` receives a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PaStatus pa_model_load(const char *path, struct PaModel **out);

/**
 * Releases a handle from [`pa_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void pa_model_free(struct PaModel *model);

/**
 * Network input extent and latent width of a loaded model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PaStatus pa_model_info(const struct PaModel *model,
                            size_t *input_h,
                            size_t *input_w,
                            size_t *latent_dim);

/**
 * Predicts the pose of one interleaved 8-bit RGB image of any size at
 * least as large as the model's crop. The image is resized and centre
 * cropped as during evaluation.
 *
 * # Safety
 * `rgb` must point to `height * width * 3` bytes; `model` and `out` must
 * be valid.
 */
enum PaStatus pa_model_predict_rgb(const struct PaModel *model,
                                   const uint8_t *rgb,
                                   size_t height,
                                   size_t width,
                                   struct PaPose *out);

/**
 * Geodesic angle in degrees between two unit quaternions `(w, x, y, z)`.
 *
 * # Safety
 * `q_pred` and `q_gt` must point to 4 doubles, `out` to one.
 */
enum PaStatus pa_rotation_angle_deg(const double *q_pred, const double *q_gt, double *out);

/**
 * Analytic costs of a built-in architecture: `mobilenetv3-large`,
 * `mobilenetv3-small` or `desk-small`.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` valid.
 */
enum PaStatus pa_profile_named(const char *name, struct PaCostSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSEADAPT_H */
