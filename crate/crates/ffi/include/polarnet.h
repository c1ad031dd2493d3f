#ifndef POLARNET_H
#define POLARNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum PnStatus {
  PN_STATUS_OK = 0,
  PN_STATUS_NULL_POINTER = 1,
  PN_STATUS_INVALID_ARGUMENT = 2,
  PN_STATUS_DIMENSION = 3,
  PN_STATUS_BUFFER_TOO_SMALL = 4,
  PN_STATUS_DATA = 5,
  PN_STATUS_NUMERIC = 6,
  PN_STATUS_PANIC = 7,
} PnStatus;

// Opaque model handle.
typedef struct PnModel PnModel;

typedef struct PnModelInfo {
  size_t branches;
  size_t theta;
  size_t r;
  size_t classes;
} PnModelInfo;

typedef struct PnMetrics {
  double acc;
  double auroc;
  double kappa;
} PnMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pn_version(void);

// Message of the last failure on this thread, or NULL.
const char *pn_last_error(void);

// Polar resampling of a single-channel row-major image in `[0, 1]`.
//
// `laterality`: 0 unknown, 1 OD, 2 OS (mirrored before sampling).
// `start_angle` is in radians. Writes `theta * r` values, rows are angles.
//
// # Safety
// `pixels` must hold `width * height` floats and `out` `out_len` floats.
enum PnStatus pn_to_polar(const float *pixels,
                          size_t width,
                          size_t height,
                          double center_u,
                          double center_v,
                          int32_t laterality,
                          size_t theta,
                          size_t r,
                          double start_angle,
                          float *out,
                          size_t out_len,
                          double *out_radius);

// Loads a checkpoint written by `polarnet train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PnStatus pn_model_load(const char *path, struct PnModel **out);

// Releases a handle. NULL is ignored.
//
// # Safety
// `model` must come from `pn_model_load` and not be used afterwards.
void pn_model_free(struct PnModel *model);

// # Safety
// `model` and `out` must be valid pointers.
enum PnStatus pn_model_info(const struct PnModel *model, struct PnModelInfo *out);

// Sets the per-branch 4×2 region prior (`branches * 8` floats, quadrant
// major, inner ring first). NULL clears it.
//
// # Safety
// `weights` must hold `len` floats.
enum PnStatus pn_model_set_prior(struct PnModel *model, const float *weights, size_t len);

// Class probabilities for `batch` samples. `inputs` is laid out as
// `[batch][branch][theta][r]`; `out` receives `batch * classes` values.
//
// # Safety
// Buffers must hold the stated number of floats.
enum PnStatus pn_model_predict(const struct PnModel *model,
                               const float *inputs,
                               size_t batch,
                               float *out,
                               size_t out_len);

// Grad-CAM region importance averaged over the batch. `target` is a class
// index, or -1 for each sample's predicted class. `out_matrices` receives
// `branches * 8` values in branch order; `out_centers` (nullable) receives
// one centre-disk value per branch.
//
// # Safety
// Buffers must hold the stated number of floats.
enum PnStatus pn_model_explain(const struct PnModel *model,
                               const float *inputs,
                               size_t batch,
                               int32_t target,
                               float *out_matrices,
                               size_t out_len,
                               float *out_centers);

// Accuracy, AUROC and Cohen's kappa at threshold 0.5. Labels are 0 or 1,
// scores are positive-class probabilities.
//
// # Safety
// `labels` and `scores` must hold `n` values; `out` must be valid.
enum PnStatus pn_metrics(const uint8_t *labels,
                         const double *scores,
                         size_t n,
                         struct PnMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLARNET_H */
