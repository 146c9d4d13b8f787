#ifndef STYLESPACE_H
#define STYLESPACE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every entry point.
typedef enum StsStatus {
  STS_STATUS_OK = 0,
  STS_STATUS_NULL_POINTER = 1,
  STS_STATUS_IO = 2,
  STS_STATUS_PARSE = 3,
  STS_STATUS_INVALID_ARGUMENT = 4,
  STS_STATUS_UNINITIALIZED = 5,
  STS_STATUS_BUFFER_TOO_SMALL = 6,
  STS_STATUS_NUMERIC = 7,
  STS_STATUS_PANIC = 8,
} StsStatus;

// Opaque model handle.
typedef struct StsModel StsModel;

// Result of one style manipulation.
typedef struct StsManipulation {
  size_t source_class;
  size_t target_class;
  double orig_sim;
  double manip_sim;
  // 1 when the manipulated slice classifies as the target.
  int32_t reclass_hit;
  // 1 when no other task's prediction changed.
  int32_t other_tasks_stable;
} StsManipulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *sts_last_error_message(void);

// Loads a checkpoint file. On success `*out` owns a handle to release
// with [`sts_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum StsStatus sts_model_load(const char *path, struct StsModel **out);

// Releases a handle from [`sts_model_load`]. Null is ignored.
//
// # Safety
// `model` must come from `sts_model_load` and not be used afterwards.
void sts_model_free(struct StsModel *model);

// # Safety
// `model` must be a live handle and `out` writable.
enum StsStatus sts_model_num_tasks(const struct StsModel *model, size_t *out);

// # Safety
// `model` must be a live handle and `out` writable.
enum StsStatus sts_model_num_classes(const struct StsModel *model, size_t task, size_t *out);

// Width of one task slice of the style vector.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum StsStatus sts_model_task_dim(const struct StsModel *model, size_t *out);

// Frequency bins the encoder expects.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum StsStatus sts_model_bins(const struct StsModel *model, size_t *out);

// Per-task nearest-prototype class and cosine score. Both output arrays
// need room for one entry per task.
//
// # Safety
// `frames` must hold `bins * n_frames` doubles; outputs must hold `len` entries.
enum StsStatus sts_classify(const struct StsModel *model,
                            const double *frames,
                            size_t bins,
                            size_t n_frames,
                            size_t *out_classes,
                            double *out_scores,
                            size_t len);

// Writes the concatenated style vector (tasks × task_dim doubles).
//
// # Safety
// `frames` must hold `bins * n_frames` doubles; `out` must hold `len` doubles.
enum StsStatus sts_extract_style(const struct StsModel *model,
                                 const double *frames,
                                 size_t bins,
                                 size_t n_frames,
                                 double *out,
                                 size_t len);

// Moves one task slice toward the target prototype with strength `alpha`
// in [0, 1] and writes the new style vector and a report.
//
// # Safety
// `frames` must hold `bins * n_frames` doubles; `out_style` must hold
// `len` doubles; `report` must be writable or null.
enum StsStatus sts_manipulate(const struct StsModel *model,
                              const double *frames,
                              size_t bins,
                              size_t n_frames,
                              size_t task,
                              size_t target_class,
                              double alpha,
                              double *out_style,
                              size_t len,
                              struct StsManipulation *report);

// Classifies a caption per task. Tasks the caption does not name get
// class -1 and score NaN.
//
// # Safety
// `caption` must be NUL-terminated; outputs must hold `len` entries.
enum StsStatus sts_classify_caption(const struct StsModel *model,
                                    const char *caption,
                                    int64_t *out_classes,
                                    double *out_scores,
                                    size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLESPACE_H */
