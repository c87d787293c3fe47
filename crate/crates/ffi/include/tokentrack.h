#ifndef TOKENTRACK_H
#define TOKENTRACK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  TT_MODE_RGB = 0,
  TT_MODE_RGBD = 1,
  TT_MODE_RGBT = 2,
  TT_MODE_RGBE = 3,
} TtMode;

/**
 * Result code of every fallible call.
 */
typedef enum {
  TT_STATUS_OK = 0,
  TT_STATUS_NULL_POINTER = 1,
  TT_STATUS_INVALID_ARGUMENT = 2,
  TT_STATUS_IO = 3,
  TT_STATUS_CHECKPOINT = 4,
  TT_STATUS_CONFIG = 5,
  TT_STATUS_DATA = 6,
  TT_STATUS_MODEL = 7,
  TT_STATUS_TRACK = 8,
  TT_STATUS_EVAL = 9,
  TT_STATUS_NUMERIC = 10,
  TT_STATUS_PANIC = 11,
} TtStatus;

/**
 * Loaded parameters; shareable by any number of trackers.
 */
typedef struct TtModel TtModel;

/**
 * One tracking session.
 */
typedef struct TtTracker TtTracker;

typedef struct {
  TtMode mode;
  bool token_propagation;
  bool cosine_window;
  size_t memory_capacity;
  /**
   * Run the forward pass in f64 instead of f32.
   */
  bool double_precision;
} TtTrackerOptions;

/**
 * Axis-aligned box in pixels, top-left corner plus size.
 */
typedef struct {
  double x;
  double y;
  double width;
  double height;
} TtBox;

typedef struct {
  double auc;
  double precision;
  double norm_precision;
  double mean_iou;
} TtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tt_version(void);

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t tt_last_error_message(char *buf, size_t len);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
TtStatus tt_model_load(const char *path, TtModel **out);

/**
 * Freshly initialized (untrained) model with the default configuration.
 *
 * # Safety
 * `out` must be writable.
 */
TtStatus tt_model_new_default(TtModel **out);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tt_model_param_count(const TtModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed. Trackers created from it
 * stay valid.
 */
void tt_model_free(TtModel *model);

/**
 * Defaults: rgb mode, propagation on, no window, memory 16, f32.
 */
TtTrackerOptions tt_tracker_options_default(void);

/**
 * # Safety
 * `model` must be a live handle, `options` readable, `out` writable.
 */
TtStatus tt_tracker_new(const TtModel *model, const TtTrackerOptions *options, TtTracker **out);

/**
 * Start a track on the first frame. `aux` may be null in rgb mode.
 *
 * # Safety
 * `tracker` must be a live handle; `rgb` must hold `width*height*3` bytes and
 * `aux` (when non-null) `width*height` bytes.
 */
TtStatus tt_tracker_init(TtTracker *tracker,
                         const uint8_t *rgb,
                         const uint8_t *aux,
                         size_t width,
                         size_t height,
                         TtBox init_box);

/**
 * Track one frame. Writes the box and its confidence in [0, 1].
 *
 * # Safety
 * As [`tt_tracker_init`]; `out_box` and `out_score` must be writable (either
 * may be null to skip it).
 */
TtStatus tt_tracker_step(TtTracker *tracker,
                         const uint8_t *rgb,
                         const uint8_t *aux,
                         size_t width,
                         size_t height,
                         TtBox *out_box,
                         double *out_score);

/**
 * # Safety
 * `tracker` must be null or a handle not yet freed.
 */
void tt_tracker_free(TtTracker *tracker);

/**
 * One-pass metrics of `n` predicted boxes against ground truth.
 *
 * # Safety
 * `pred` and `gt` must hold `n` boxes; `out` must be writable.
 */
TtStatus tt_evaluate(const TtBox *pred, const TtBox *gt, size_t n, TtMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOKENTRACK_H */
