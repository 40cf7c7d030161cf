#ifndef RAINSEG_H
#define RAINSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Label value for nodata cells.
#define RS_NODATA 255

typedef enum RsStatus {
  RS_STATUS_OK = 0,
  RS_STATUS_NULL_POINTER = 1,
  RS_STATUS_INVALID_ARGUMENT = 2,
  RS_STATUS_IO = 3,
  RS_STATUS_FORMAT = 4,
  RS_STATUS_NON_FINITE = 5,
  RS_STATUS_INTERNAL = 6,
} RsStatus;

// Opaque handle to a loaded checkpoint.
typedef struct RsModel RsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *rs_last_error(void);

// Loads a checkpoint file. On success `*out` owns a handle to release with
// [`rs_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum RsStatus rs_model_load(const char *path, struct RsModel **out);

// Releases a handle from [`rs_model_load`]. Null is ignored.
//
// # Safety
// `model` must come from `rs_model_load` and not be used afterwards.
void rs_model_free(struct RsModel *model);

// Reports the input channel count, class count and patch size the model expects.
//
// # Safety
// `model` must be a live handle; the out pointers must be writable.
enum RsStatus rs_model_info(const struct RsModel *model,
                            uintptr_t *in_channels,
                            uintptr_t *num_classes,
                            uintptr_t *patch_size);

// Predicts a class per cell for a `channels x height x width` grid.
//
// `mask` may be null, in which case a cell is valid when all its channel
// values are finite. Invalid cells get [`RS_NODATA`] in `out_labels`, which
// must hold `height * width` bytes.
//
// # Safety
// `values` must hold `channels * height * width` floats and `mask`, when not
// null, `height * width` bytes.
enum RsStatus rs_model_predict(struct RsModel *model,
                               const float *values,
                               const uint8_t *mask,
                               uintptr_t channels,
                               uintptr_t height,
                               uintptr_t width,
                               uint8_t *out_labels);

// Maps seasonal rainfall totals (mm) to rainfall classes using a built-in
// region scheme such as `"Kerala"`. NaN totals become [`RS_NODATA`].
//
// # Safety
// `rain_mm` must hold `len` floats, `out_labels` `len` bytes and `region`
// must be NUL-terminated.
enum RsStatus rs_quantize(const float *rain_mm,
                          uintptr_t len,
                          const char *region,
                          uint8_t *out_labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAINSEG_H */
