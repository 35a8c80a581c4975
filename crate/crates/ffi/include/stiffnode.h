#ifndef STIFFNODE_H
#define STIFFNODE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum StiffnodeStatus {
  STIFFNODE_STATUS_OK = 0,
  STIFFNODE_STATUS_NULL_POINTER = 1,
  STIFFNODE_STATUS_INVALID_ARGUMENT = 2,
  STIFFNODE_STATUS_UNKNOWN_NAME = 3,
  STIFFNODE_STATUS_PARSE = 4,
  STIFFNODE_STATUS_IO = 5,
  // A solver diverged. For training this still produces a report.
  STIFFNODE_STATUS_DIVERGED = 6,
  STIFFNODE_STATUS_NUMERICAL = 7,
  STIFFNODE_STATUS_PANIC = 8,
} StiffnodeStatus;

// Owned trajectory dataset.
typedef struct StiffnodeDataset StiffnodeDataset;

// Owned polynomial model.
typedef struct StiffnodeModel StiffnodeModel;

// Owned training report.
typedef struct StiffnodeReport StiffnodeReport;

// Training options with plain C types. Initialize with
// [`stiffnode_train_options_default`].
typedef struct StiffnodeTrainOptions {
  // Network degree; 0 selects the problem default (1 without a problem).
  size_t degree;
  // Hidden width; 0 selects the monomial count.
  size_t width;
  double lr;
  double lr_final;
  size_t epochs;
  uint64_t seed;
  double newton_tol;
  bool freeze_linearization;
  bool segment_weights;
  size_t backoff_retries;
  size_t refine_iterations;
} StiffnodeTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. The pointer
// stays valid until the next failing call on this thread.
const char *stiffnode_last_error(void);

// Library version as a static string.
const char *stiffnode_version(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed.
void stiffnode_string_free(char *s);

// Matrix exponential of a row-major `d×d` matrix into `out` (`d*d` values).
//
// # Safety
// `a` and `out` must point to `d*d` doubles.
enum StiffnodeStatus stiffnode_expm(const double *a, size_t d, double *out);

// Reference data for a registered problem on `n` uniform points.
//
// # Safety
// `problem` must be a nul-terminated string; `out` a valid pointer.
enum StiffnodeStatus stiffnode_dataset_generate(const char *problem,
                                                size_t n,
                                                struct StiffnodeDataset **out);

// Dataset from `n` times and `n*d` row-major states.
//
// # Safety
// `times` must hold `n` doubles, `states` `n*d`; `problem` may be null.
enum StiffnodeStatus stiffnode_dataset_from_arrays(const char *problem,
                                                   const double *times,
                                                   const double *states,
                                                   size_t n,
                                                   size_t d,
                                                   struct StiffnodeDataset **out);

// Reads a dataset CSV (and its sidecar, when present).
//
// # Safety
// `path` must be a nul-terminated string; `out` a valid pointer.
enum StiffnodeStatus stiffnode_dataset_read(const char *path, struct StiffnodeDataset **out);

// Writes the dataset CSV and sidecar.
//
// # Safety
// `ds` must be a live handle; `path` a nul-terminated string.
enum StiffnodeStatus stiffnode_dataset_write(const struct StiffnodeDataset *ds, const char *path);

// Number of samples; 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t stiffnode_dataset_len(const struct StiffnodeDataset *ds);

// State dimension; 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t stiffnode_dataset_dim(const struct StiffnodeDataset *ds);

// Copies sample `i` into `t` and `y` (`d` doubles).
//
// # Safety
// `ds` must be a live handle, `t` valid, `y` hold `d` doubles.
enum StiffnodeStatus stiffnode_dataset_sample(const struct StiffnodeDataset *ds,
                                              size_t i,
                                              double *t,
                                              double *y,
                                              size_t d);

// # Safety
// `ds` must be null or a handle not yet freed.
void stiffnode_dataset_free(struct StiffnodeDataset *ds);

// Library defaults for training.
//
// # Safety
// `out` must be a valid pointer.
enum StiffnodeStatus stiffnode_train_options_default(struct StiffnodeTrainOptions *out);

// Trains a network on `ds` with `method`. When `problem` names a registered
// problem its truth is used for the error table and its degree as default.
// A solver divergence still yields a report and returns `Diverged`.
//
// # Safety
// Handles and strings must be valid; `problem` may be null.
enum StiffnodeStatus stiffnode_train(const struct StiffnodeDataset *ds,
                                     const char *method,
                                     const char *problem,
                                     const struct StiffnodeTrainOptions *options,
                                     struct StiffnodeReport **out);

// Whether training finished without divergence.
//
// # Safety
// `r` must be null or a live handle.
bool stiffnode_report_converged(const struct StiffnodeReport *r);

// Best loss reached; NaN when none was recorded or `r` is null.
//
// # Safety
// `r` must be null or a live handle.
double stiffnode_report_final_loss(const struct StiffnodeReport *r);

// Largest fractional relative coefficient error; NaN without a truth model.
//
// # Safety
// `r` must be null or a live handle.
double stiffnode_report_max_relative_error(const struct StiffnodeReport *r);

// Report as JSON; free with [`stiffnode_string_free`]. Null on failure.
//
// # Safety
// `r` must be null or a live handle.
char *stiffnode_report_json(const struct StiffnodeReport *r);

// Copies the recovered model out of a report.
//
// # Safety
// `r` must be a live handle; `out` a valid pointer.
enum StiffnodeStatus stiffnode_report_model(const struct StiffnodeReport *r,
                                            struct StiffnodeModel **out);

// # Safety
// `r` must be null or a handle not yet freed.
void stiffnode_report_free(struct StiffnodeReport *r);

// Parses a recovered-model JSON document.
//
// # Safety
// `json` must be a nul-terminated string; `out` a valid pointer.
enum StiffnodeStatus stiffnode_model_from_json(const char *json, struct StiffnodeModel **out);

// Ground-truth model of a registered problem.
//
// # Safety
// `problem` must be a nul-terminated string; `out` a valid pointer.
enum StiffnodeStatus stiffnode_problem_truth(const char *problem, struct StiffnodeModel **out);

// Number of variables (and equations) of the model; 0 for null.
//
// # Safety
// `m` must be null or a live handle.
size_t stiffnode_model_dim(const struct StiffnodeModel *m);

// Coefficient of the monomial with exponents `exps` (`vars` entries) in
// equation `eq`.
//
// # Safety
// `m` must be a live handle, `exps` hold `vars` values, `out` be valid.
enum StiffnodeStatus stiffnode_model_coefficient(const struct StiffnodeModel *m,
                                                 size_t eq,
                                                 const uint32_t *exps,
                                                 size_t vars,
                                                 double *out);

// Evaluates the model at `x` (`d` values) into `out` (`d` values).
//
// # Safety
// `m` must be a live handle; `x` and `out` hold `d` doubles.
enum StiffnodeStatus stiffnode_model_evaluate(const struct StiffnodeModel *m,
                                              const double *x,
                                              size_t d,
                                              double *out);

// Model as JSON; free with [`stiffnode_string_free`]. Null for null input.
//
// # Safety
// `m` must be null or a live handle.
char *stiffnode_model_json(const struct StiffnodeModel *m);

// # Safety
// `m` must be null or a handle not yet freed.
void stiffnode_model_free(struct StiffnodeModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STIFFNODE_H */
