#ifndef BFPCNN_H
#define BFPCNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a call.
typedef enum BfpcnnStatus {
  BFPCNN_STATUS_OK = 0,
  BFPCNN_STATUS_NULL_ARGUMENT = 1,
  BFPCNN_STATUS_INVALID_ARGUMENT = 2,
  BFPCNN_STATUS_IO = 3,
  BFPCNN_STATUS_BAD_CHECKPOINT = 4,
  BFPCNN_STATUS_SHAPE_MISMATCH = 5,
  BFPCNN_STATUS_BUFFER_TOO_SMALL = 6,
  BFPCNN_STATUS_FAILED = 7,
  BFPCNN_STATUS_PANIC = 8,
} BfpcnnStatus;

// A built or loaded model.
typedef struct BfpcnnModel BfpcnnModel;

// Aggregate scores of a confusion matrix.
typedef struct BfpcnnMetrics {
  double accuracy;
  double macro_precision;
  double macro_recall;
  double macro_f1;
  double micro_precision;
  double micro_recall;
} BfpcnnMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call on the same thread.
const char *bfpcnn_last_error(void);

// Name of class `index`, or null when out of range. Static storage.
const char *bfpcnn_class_name(size_t index);

// Number of output classes.
size_t bfpcnn_class_count(void);

// Build a freshly initialized model. `config` holds `key = value` lines and
// may be null for the defaults.
//
// # Safety
// `config` is null or a nul-terminated string; `out` is writable.
enum BfpcnnStatus bfpcnn_model_new(const char *config, struct BfpcnnModel **out);

// Load a checkpoint. The architecture comes from `config_path` when given,
// else from `config.txt` beside the checkpoint, else the defaults.
//
// # Safety
// `ckpt_path` is a nul-terminated string, `config_path` is null or one, and
// `out` is writable.
enum BfpcnnStatus bfpcnn_model_load(const char *ckpt_path,
                                    const char *config_path,
                                    struct BfpcnnModel **out);

// Write the model's parameters to `path`.
//
// # Safety
// `model` comes from this library; `path` is a nul-terminated string.
enum BfpcnnStatus bfpcnn_model_save(const struct BfpcnnModel *model, const char *path);

// Release a model. Null is ignored.
//
// # Safety
// `model` is null or came from this library and is not used afterwards.
void bfpcnn_model_free(struct BfpcnnModel *model);

// Trainable parameter count, or 0 for a null model.
//
// # Safety
// `model` is null or came from this library.
size_t bfpcnn_model_param_count(const struct BfpcnnModel *model);

// Side length of the square input the model expects, or 0 for a null model.
//
// # Safety
// `model` is null or came from this library.
size_t bfpcnn_model_input_size(const struct BfpcnnModel *model);

// Class probabilities for one grayscale image of any size. The image is
// resized to the model input and scaled to [0, 1]; `probs` receives
// `bfpcnn_class_count()` values.
//
// # Safety
// `pixels` holds `height * width` bytes, row-major; `probs` holds
// `probs_len` floats.
enum BfpcnnStatus bfpcnn_model_predict(const struct BfpcnnModel *model,
                                       const uint8_t *pixels,
                                       size_t height,
                                       size_t width,
                                       float *probs,
                                       size_t probs_len);

// Equalize, median-filter with an odd `window` and resize to
// `target x target`. `out` receives `target * target` values in [0, 1].
//
// # Safety
// `pixels` holds `height * width` bytes; `out` holds `out_len` floats.
enum BfpcnnStatus bfpcnn_preprocess(const uint8_t *pixels,
                                    size_t height,
                                    size_t width,
                                    size_t target,
                                    size_t window,
                                    float *out,
                                    size_t out_len);

// Scores of a `classes x classes` confusion matrix given row-major with rows
// as true classes. Each of `precision`, `recall` and `f1` may be null or
// hold `classes` doubles for the per-class values.
//
// # Safety
// `counts` holds `classes * classes` values; `out` is writable; the
// per-class buffers are null or hold `classes` doubles.
enum BfpcnnStatus bfpcnn_metrics(const uint64_t *counts,
                                 size_t classes,
                                 struct BfpcnnMetrics *out,
                                 double *precision,
                                 double *recall,
                                 double *f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BFPCNN_H */
