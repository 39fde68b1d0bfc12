#ifndef SEGNET_H
#define SEGNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SegStatus {
  SEG_STATUS_OK = 0,
  SEG_STATUS_NULL_POINTER = 1,
  SEG_STATUS_INVALID_ARGUMENT = 2,
  SEG_STATUS_SHAPE_MISMATCH = 3,
  SEG_STATUS_DATA = 4,
  SEG_STATUS_CHECKPOINT = 5,
  SEG_STATUS_IO = 6,
  SEG_STATUS_DIVERGED = 7,
  SEG_STATUS_BUFFER_TOO_SMALL = 8,
  SEG_STATUS_PANIC = 9,
} SegStatus;

// Loaded checkpoint ready for eval-mode inference.
typedef struct SegModel SegModel;

// Confusion counts of a binary segmentation.
typedef struct SegCounts {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
} SegCounts;

// Derived metrics; an undefined value is NaN.
typedef struct SegMetrics {
  double dice;
  double sensitivity;
  double specificity;
  double ppv;
} SegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *seg_version(void);

// Copy the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length without the NUL; 0
// when there is no error.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t seg_last_error_message(char *buf, size_t len);

// Load a checkpoint file; on success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for writing.
enum SegStatus seg_model_load(const char *path, struct SegModel **out);

// Release a handle from [`seg_model_load`]; null is ignored.
//
// # Safety
// `model` must be null or a live handle not used afterwards.
void seg_model_free(struct SegModel *model);

// Input channels the model expects (1 for CT or PET, 2 for PET/CT), or 0
// for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t seg_model_in_channels(const struct SegModel *model);

// Spatial sizes passed to [`seg_model_predict`] must be multiples of this;
// 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t seg_model_size_multiple(const struct SegModel *model);

// Eval-mode foreground probabilities for `n` preprocessed slices.
// `input` is `(n, c, h, w)` row-major; `out` receives `(n, h, w)`.
//
// # Safety
// `model` must be a live handle, `input` valid for `n*c*h*w` floats and
// `out` valid for `out_len` floats.
enum SegStatus seg_model_predict(struct SegModel *model,
                                 const float *input,
                                 size_t n,
                                 size_t c,
                                 size_t h,
                                 size_t w,
                                 float *out,
                                 size_t out_len);

// Window `n` HU values into `[0, 1]`.
//
// # Safety
// `hu` and `out` must be valid for `n` floats.
enum SegStatus seg_window_ct(const float *hu, size_t n, double center, double width, float *out);

// Voxelwise confusion counts of two binary masks of length `n`.
//
// # Safety
// `pred` and `truth` must be valid for `n` bytes; `out` valid for writing.
enum SegStatus seg_confusion(const uint8_t *pred,
                             const uint8_t *truth,
                             size_t n,
                             struct SegCounts *out);

// Dice, sensitivity, specificity and PPV of `counts`.
//
// # Safety
// `counts` must be readable and `out` writable.
enum SegStatus seg_metrics(const struct SegCounts *counts, struct SegMetrics *out);

// Write a synthetic cohort of `patients` volumes of `d x h x w` to `out_dir`.
//
// # Safety
// `out_dir` must be a NUL-terminated string.
enum SegStatus seg_phantom_write(const char *out_dir,
                                 size_t patients,
                                 size_t d,
                                 size_t h,
                                 size_t w,
                                 uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGNET_H */
