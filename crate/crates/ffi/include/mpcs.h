#ifndef MPCS_H
#define MPCS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MpcsStatus {
  MPCS_STATUS_OK = 0,
  MPCS_STATUS_NULL_POINTER = 1,
  MPCS_STATUS_INVALID_ARGUMENT = 2,
  MPCS_STATUS_CONFIG = 3,
  MPCS_STATUS_ZERO_VECTOR = 4,
  MPCS_STATUS_DEGENERATE_BATCH = 5,
  MPCS_STATUS_IO = 6,
  MPCS_STATUS_CHECKPOINT = 7,
  MPCS_STATUS_EMPTY_INPUT = 8,
  MPCS_STATUS_SHAPE_MISMATCH = 9,
  MPCS_STATUS_RUNTIME = 10,
  MPCS_STATUS_PANIC = 11,
} MpcsStatus;

/*
 Pair-sampling strategy selector.
 */
typedef enum MpcsStrategy {
  /*
   Always 200X then 400X.
   */
  MPCS_STRATEGY_FIXED = 0,
  /*
   First view uniform, second from the documented lookup.
   */
  MPCS_STRATEGY_ORDERED = 1,
  /*
   Uniform over the 12 ordered pairs of distinct factors.
   */
  MPCS_STRATEGY_RANDOM = 2,
} MpcsStrategy;

/*
 Encoder loaded from a checkpoint.
 */
typedef struct MpcsEncoder MpcsEncoder;

/*
 Pair sampler with its own seeded random stream.
 */
typedef struct MpcsSampler MpcsSampler;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call into this library on the
 same thread.
 */
const char *mpcs_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *mpcs_version(void);

/*
 NT-Xent over `rows` embeddings of width `dim` (row-major), where row `i`
 and row `i + rows/2` are the two views of one specimen. Writes the mean
 loss to `loss_out` and, when `grad_out` is non-null, the `rows * dim`
 gradient.

 # Safety
 `z` must hold `rows * dim` doubles; `loss_out` one; `grad_out` is null or
 holds `rows * dim`.
 */
enum MpcsStatus mpcs_nt_xent(const double *z,
                             size_t rows,
                             size_t dim,
                             double temperature,
                             bool exclude_positive,
                             double *loss_out,
                             double *grad_out);

/*
 Fraction of `n` predictions equal to the true label.

 # Safety
 `truth` and `predicted` hold `n` values; `out` one.
 */
enum MpcsStatus mpcs_image_level_accuracy(const uint32_t *truth,
                                          const uint32_t *predicted,
                                          size_t n,
                                          double *out);

/*
 Mean over patients of each patient's fraction of correct images.

 # Safety
 `patients`, `truth` and `predicted` hold `n` values; `out` one.
 */
enum MpcsStatus mpcs_patient_level_accuracy(const uint32_t *patients,
                                            const uint32_t *truth,
                                            const uint32_t *predicted,
                                            size_t n,
                                            double *out);

/*
 Grad-CAM map from `k` channels of `h * w` activations and gradients
 (channel-major). Writes `h * w` values in `[0, 1]`.

 # Safety
 `activations` and `gradients` hold `k * h * w` doubles; `out` `h * w`.
 */
enum MpcsStatus mpcs_grad_cam_map(const double *activations,
                                  const double *gradients,
                                  size_t k,
                                  size_t h,
                                  size_t w,
                                  double *out);

/*
 Creates a sampler; `out` receives the handle.

 # Safety
 `out` must be writable.
 */
enum MpcsStatus mpcs_sampler_new(enum MpcsStrategy strategy,
                                 uint64_t seed,
                                 struct MpcsSampler **out);

/*
 Draws one pair; magnifications are written as 40, 100, 200 or 400.

 # Safety
 `sampler` comes from [`mpcs_sampler_new`]; `first` and `second` are writable.
 */
enum MpcsStatus mpcs_sampler_draw(struct MpcsSampler *sampler, uint32_t *first, uint32_t *second);

/*
 # Safety
 `sampler` is null or an unfreed handle from [`mpcs_sampler_new`].
 */
void mpcs_sampler_free(struct MpcsSampler *sampler);

/*
 Loads the encoder stored in a checkpoint file.

 # Safety
 `path` is a NUL-terminated UTF-8 string; `out` is writable.
 */
enum MpcsStatus mpcs_encoder_load(const char *path, struct MpcsEncoder **out);

/*
 Width of the pooled representation; 0 for a null handle.

 # Safety
 `encoder` is null or a live handle.
 */
size_t mpcs_encoder_feature_dim(const struct MpcsEncoder *encoder);

/*
 Expected square input side in pixels; 0 for a null handle.

 # Safety
 `encoder` is null or a live handle.
 */
size_t mpcs_encoder_input_size(const struct MpcsEncoder *encoder);

/*
 Encodes `n` RGB images of `input_size * input_size * 3` bytes each
 (row-major, interleaved) into `n * feature_dim` doubles.

 # Safety
 `encoder` is a live handle; `pixels` and `out` have the sizes above.
 */
enum MpcsStatus mpcs_encoder_encode(const struct MpcsEncoder *encoder,
                                    const uint8_t *pixels,
                                    size_t n,
                                    double *out);

/*
 # Safety
 `encoder` is null or an unfreed handle from [`mpcs_encoder_load`].
 */
void mpcs_encoder_free(struct MpcsEncoder *encoder);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPCS_H */
