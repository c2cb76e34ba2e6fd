#ifndef POLARAPP_H
#define POLARAPP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result codes. Zero is success.
typedef enum PolarappStatus {
  POLARAPP_STATUS_OK = 0,
  // A required pointer argument was null.
  POLARAPP_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  POLARAPP_STATUS_INVALID_UTF8 = 2,
  // Bad configuration or argument value.
  POLARAPP_STATUS_CONFIG = 3,
  // Filesystem or file-format failure.
  POLARAPP_STATUS_IO = 4,
  // Numerical or shape failure inside the library.
  POLARAPP_STATUS_RUNTIME = 5,
  // A library invariant was violated.
  POLARAPP_STATUS_INTERNAL = 6,
  // A panic was caught at the boundary.
  POLARAPP_STATUS_PANIC = 7,
} PolarappStatus;

// Output planes of an inference result.
typedef enum PolarappOutput {
  // Demosaicked stack `[12, H, W]`, channel = 4 * color + angle.
  POLARAPP_OUTPUT_STACK = 0,
  // Total intensity `[3, H, W]`.
  POLARAPP_OUTPUT_S0 = 1,
  // Degree of linear polarization `[3, H, W]`.
  POLARAPP_OUTPUT_DOLP = 2,
  // Angle of polarization in radians `[3, H, W]`.
  POLARAPP_OUTPUT_AOP = 3,
  // Normals or transmission layer `[3, H, W]`.
  POLARAPP_OUTPUT_TASK = 4,
} PolarappOutput;

// Result of running the pipeline on one input.
typedef struct PolarappInference PolarappInference;

// A trained pipeline loaded from a checkpoint directory.
typedef struct PolarappModel PolarappModel;

// Result of one evaluation run.
typedef struct PolarappReport PolarappReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string.
// The pointer stays valid until the next library call on this thread.
const char *polarapp_last_error(void);

// Library version as a static NUL-terminated string.
const char *polarapp_version(void);

// Generates a synthetic dataset of `count` scenes of `size x size` pixels
// into `out_dir` with the default split ratios. `task` is `"sfp"` or `"dfp"`.
//
// # Safety
// String arguments are NUL-terminated.
enum PolarappStatus polarapp_generate(const char *task,
                                      size_t count,
                                      size_t size,
                                      uint64_t seed,
                                      const char *out_dir);

// Trains from a JSON run configuration file. A negative
// `stop_after_epoch` runs to completion. With `resume` set, training
// continues from the newest checkpoint in the output directory.
//
// # Safety
// `config_path` is NUL-terminated.
enum PolarappStatus polarapp_train(const char *config_path, int64_t stop_after_epoch, bool resume);

// Loads a checkpoint directory. On success `*out` owns a new handle.
//
// # Safety
// `checkpoint` is NUL-terminated; `out` is writable.
enum PolarappStatus polarapp_model_load(const char *checkpoint, struct PolarappModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` is null or came from [`polarapp_model_load`] and is not used afterwards.
void polarapp_model_free(struct PolarappModel *model);

// Evaluates `model` on a dataset split (`"train"`, `"meta_train"`,
// `"meta_test"` or `"test"`) under a regime (`"with_A"` or `"without_A"`),
// writing report files to `out_dir`. On success `*out` owns a new report.
//
// # Safety
// `model` is a live handle; strings are NUL-terminated; `out` is writable.
enum PolarappStatus polarapp_model_evaluate(const struct PolarappModel *model,
                                            const char *dataset,
                                            const char *split,
                                            const char *regime,
                                            const char *out_dir,
                                            struct PolarappReport **out);

// Number of scenes in a report.
//
// # Safety
// `report` is null or a live handle.
size_t polarapp_report_scene_count(const struct PolarappReport *report);

// Aggregate value of a metric such as `"s0_psnr"` or `"mae_deg"`.
//
// # Safety
// `report` is a live handle; `metric` is NUL-terminated; `value` is writable.
enum PolarappStatus polarapp_report_metric(const struct PolarappReport *report,
                                           const char *metric,
                                           double *value);

// Releases a report. Null is ignored.
//
// # Safety
// `report` is null or came from [`polarapp_model_evaluate`] and is not used afterwards.
void polarapp_report_free(struct PolarappReport *report);

// Runs the pipeline on a row-major array of `rank` dimensions: either a
// `[12, h, w]` stack or a raw `[H, W]` sensor frame. On success `*out`
// owns a new result.
//
// # Safety
// `model` is a live handle; `shape` holds `rank` entries and `data` holds
// their product; `out` is writable.
enum PolarappStatus polarapp_model_infer(const struct PolarappModel *model,
                                         const double *data,
                                         const size_t *shape,
                                         size_t rank,
                                         struct PolarappInference **out);

// Borrows one output plane, selected by a [`PolarappOutput`] value.
// `*data` points into the result and stays valid until the result is
// freed; `shape` receives 3 entries.
//
// # Safety
// `inference` is a live handle; `data` is writable; `shape` holds 3 entries.
enum PolarappStatus polarapp_inference_output(const struct PolarappInference *inference,
                                              uint32_t which,
                                              const double **data,
                                              size_t *shape);

// Releases an inference result. Null is ignored.
//
// # Safety
// `inference` is null or came from [`polarapp_model_infer`] and is not used afterwards.
void polarapp_inference_free(struct PolarappInference *inference);

// Runs a self-check suite (`"optics"`, `"autodiff"`, `"bilevel"` or
// `"eit"`). `*passed` reports whether every check held and `*max_value`
// the largest measured error.
//
// # Safety
// `suite` is NUL-terminated; `passed` and `max_value` are writable.
enum PolarappStatus polarapp_verify(const char *suite,
                                    uint64_t seed,
                                    bool *passed,
                                    double *max_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLARAPP_H */
