#ifndef METASCHED_H
#define METASCHED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum MsActivation {
  MS_ACTIVATION_IDENTITY = 0,
  MS_ACTIVATION_RELU = 1,
  MS_ACTIVATION_TANH = 2,
} MsActivation;

typedef enum MsStatus {
  MS_STATUS_OK = 0,
  MS_STATUS_NULL_POINTER = 1,
  // Bad arguments, configuration or data.
  MS_STATUS_INVALID = 2,
  // Non-finite values or divergence.
  MS_STATUS_NUMERIC = 3,
  MS_STATUS_IO = 4,
  // A Rust panic was caught at the boundary.
  MS_STATUS_PANIC = 5,
} MsStatus;

// An MLP and its flat parameter vector.
typedef struct MsModel MsModel;

// A configured training run and, once trained, its outcome.
typedef struct MsRun MsRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *ms_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void ms_string_free(char *s);

// Creates an MLP `in_dim -> hidden[0] -> ... -> out_dim` with seeded
// initialization. The output layer is linear.
//
// # Safety
// `hidden` must point to `n_hidden` values; `out_model` must be writable.
enum MsStatus ms_model_new(size_t in_dim,
                           const size_t *hidden,
                           size_t n_hidden,
                           size_t out_dim,
                           enum MsActivation activation,
                           uint64_t seed,
                           struct MsModel **out_model);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`ms_model_new`] and not be freed twice.
void ms_model_free(struct MsModel *model);

// # Safety
// `model` must be a live handle and `count` writable.
enum MsStatus ms_model_param_count(const struct MsModel *model, size_t *count);

// Copies the flat parameters into `buf`, which must hold exactly the
// parameter count.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum MsStatus ms_model_get_params(const struct MsModel *model, double *buf, size_t len);

// Replaces the flat parameters; all values must be finite.
//
// # Safety
// `values` must point to `len` doubles.
enum MsStatus ms_model_set_params(struct MsModel *model, const double *values, size_t len);

// Logits for `rows` samples of `cols` features (row-major) into `logits`,
// which holds `rows * out_dim` values.
//
// # Safety
// Buffers must have the stated lengths.
enum MsStatus ms_model_forward(const struct MsModel *model,
                               const double *x,
                               size_t rows,
                               size_t cols,
                               double *logits,
                               size_t logits_len);

// One-step meta-gradient of the meta loss with respect to each train
// row's multiplier, at unit multipliers and weight decay `lambda_wd`.
// Writes `train_rows` values to `grads`.
//
// # Safety
// Buffers must have the stated lengths.
enum MsStatus ms_instance_metagrad(const struct MsModel *model,
                                   const double *train_x,
                                   const size_t *train_labels,
                                   size_t train_rows,
                                   const double *meta_x,
                                   const size_t *meta_labels,
                                   size_t meta_rows,
                                   double lr,
                                   double lambda_wd,
                                   double *grads);

// Runs every gradient check with `trials` random problems. `all_pass` is
// set to 1 when every target passes; `report_json`, when not null,
// receives a JSON array of per-target reports.
//
// # Safety
// `all_pass` must be writable; `report_json` may be null.
enum MsStatus ms_gradcheck(size_t trials, uint64_t seed, int32_t *all_pass, char **report_json);

// Parses a `key = value` configuration.
//
// # Safety
// `config_text` must be a nul-terminated UTF-8 string.
enum MsStatus ms_run_new(const char *config_text, struct MsRun **out_run);

// Releases a run. Null is ignored.
//
// # Safety
// `run` must come from [`ms_run_new`] and not be freed twice.
void ms_run_free(struct MsRun *run);

// Builds the data and trains to completion. Retraining replaces the
// previous outcome.
//
// # Safety
// `run` must be a live handle.
enum MsStatus ms_run_train(struct MsRun *run);

// Per-epoch metrics of a trained run as line-delimited JSON.
//
// # Safety
// `run` must be a live handle and `out_json` writable.
enum MsStatus ms_run_metrics_json(const struct MsRun *run, char **out_json);

// Copies the trained (evaluation) parameters into a new model handle.
//
// # Safety
// `run` must be a live handle and `out_model` writable.
enum MsStatus ms_run_model(const struct MsRun *run, struct MsModel **out_model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METASCHED_H */
