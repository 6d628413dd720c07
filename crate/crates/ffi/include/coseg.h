#ifndef COSEG_H
#define COSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CosegStatus {
  COSEG_STATUS_OK = 0,
  COSEG_STATUS_NULL_POINTER = 1,
  COSEG_STATUS_INVALID_ARGUMENT = 2,
  COSEG_STATUS_DIMENSION_MISMATCH = 3,
  COSEG_STATUS_IO = 4,
  COSEG_STATUS_CONFIG = 5,
  COSEG_STATUS_PANIC = 6,
  COSEG_STATUS_OTHER = 7,
} CosegStatus;

// Trained co-segmentation network.
typedef struct CosegModel CosegModel;

typedef struct CosegCrfParams {
  double w_app;
  double w_smooth;
  double theta_alpha;
  double theta_beta;
  double theta_gamma;
  size_t iterations;
} CosegCrfParams;

typedef struct CosegMetrics {
  double recall;
  double precision;
  double dice;
  double volumetric_similarity;
  // Averaged Hausdorff distance in pixels; NaN when either mask is empty.
  double avd;
} CosegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *coseg_last_error(void);

// Library version as a static NUL-terminated string.
const char *coseg_version(void);

// Loads a model from a pipeline config file (for the network layout and
// input size) and a checkpoint written by `coseg train`.
//
// # Safety
// `config_path` and `checkpoint_path` must be NUL-terminated strings and
// `out` must point to writable storage for one pointer.
enum CosegStatus coseg_model_load(const char *config_path,
                                  const char *checkpoint_path,
                                  struct CosegModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`coseg_model_load`] and not be used afterwards.
void coseg_model_free(struct CosegModel *model);

// Side length of the square inputs the model expects, or 0 for null.
//
// # Safety
// `model` must be null or a live model.
size_t coseg_model_input_size(const struct CosegModel *model);

// Foreground probabilities for a pair of preprocessed `size x size`
// images. Outputs hold `size * size` values each.
//
// # Safety
// All pointers must be valid for `size * size` elements.
enum CosegStatus coseg_model_predict_pair(const struct CosegModel *model,
                                          const double *image_a,
                                          const double *image_b,
                                          size_t size,
                                          double *out_a,
                                          double *out_b);

// GrabCut mask from a RECIST cross. `recist` holds the major axis
// endpoints followed by the minor axis endpoints as
// `x11, y11, x12, y12, x21, y21, x22, y22`. GrabCut runs on the endpoint
// box grown by `margin` pixels with default settings; the margin must
// exceed the 20 pixel box expansion so that definite background exists.
//
// # Safety
// `image` and `out_mask` must be valid for `width * height` elements and
// `recist` for 8.
enum CosegStatus coseg_grabcut(const double *image,
                               size_t width,
                               size_t height,
                               const double *recist,
                               size_t margin,
                               uint64_t seed,
                               uint8_t *out_mask);

struct CosegCrfParams coseg_crf_default_params(void);

// Dense CRF refinement of a foreground probability map. `image` should be
// scaled to [0, 1]. Null `params` selects the defaults.
//
// # Safety
// `image`, `prob` and `out_mask` must be valid for `width * height`
// elements; `params` must be null or valid.
enum CosegStatus coseg_crf_refine(const double *image,
                                  const double *prob,
                                  size_t width,
                                  size_t height,
                                  const struct CosegCrfParams *params,
                                  uint8_t *out_mask);

// Scores `pred` against `gt`.
//
// # Safety
// `pred` and `gt` must be valid for `width * height` elements and `out`
// for one struct.
enum CosegStatus coseg_evaluate(const uint8_t *pred,
                                const uint8_t *gt,
                                size_t width,
                                size_t height,
                                struct CosegMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COSEG_H */
