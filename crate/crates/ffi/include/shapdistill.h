#ifndef SHAPDISTILL_H
#define SHAPDISTILL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SdStatus {
  SD_STATUS_OK = 0,
  SD_STATUS_NULL_ARGUMENT = 1,
  SD_STATUS_INVALID_UTF8 = 2,
  SD_STATUS_IO = 3,
  SD_STATUS_PARSE = 4,
  SD_STATUS_INVALID_INPUT = 5,
  SD_STATUS_POLICY = 6,
  SD_STATUS_RETRIEVAL = 7,
  SD_STATUS_STORE = 8,
  SD_STATUS_PANIC = 99,
} SdStatus;

// Guidance category of a reward.
typedef enum SdGuidance {
  SD_GUIDANCE_OVER = 0,
  SD_GUIDANCE_UNDER = 1,
  SD_GUIDANCE_ACCEPTABLE = 2,
  SD_GUIDANCE_CONTRADICTS = 3,
} SdGuidance;

typedef enum SdTier {
  SD_TIER_INTERSECTION = 0,
  SD_TIER_MAJORITY = 1,
  SD_TIER_GLOBAL = 2,
  SD_TIER_UNSUPPORTED = 3,
} SdTier;

// Opaque contribution probability base.
typedef struct SdAcpb SdAcpb;

// Opaque case store.
typedef struct SdStore SdStore;

typedef struct SdReward {
  double diff;
  double alignment;
  double score;
  int32_t guidance;
} SdReward;

typedef struct SdDistillSummary {
  size_t total;
  size_t converged;
  size_t unconverged;
  size_t stored;
  size_t failed;
} SdDistillSummary;

typedef struct SdPrediction {
  double probability;
  // 0 healthy, 1 unhealthy.
  uint8_t classification;
  size_t healthy_votes;
  size_t unhealthy_votes;
  // [`SdTier`] of the first majority run.
  int32_t tier;
  size_t precedents;
} SdPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *sd_last_error(void);

double sd_sigmoid(double x);

// `sigmoid(base_value + mean_shap) - sigmoid(base_value)`.
double sd_contribution_probability(double base_value, double mean_shap);

// Interval midpoint of `value` on a grid of spacing `step`.
//
// # Safety
// `out` must be a valid pointer.
enum SdStatus sd_assign_interval(double value, double step, bool integer_kind, double *out);

// `0.5 + sum(c_i * w_i)` clamped to [0, 1].
//
// # Safety
// `contributions` and `weights` must point to `n` doubles; `out` must be valid.
enum SdStatus sd_infer_probability(const double *contributions,
                                   const double *weights,
                                   size_t n,
                                   double *out);

// # Safety
// `out` must be a valid pointer.
enum SdStatus sd_compute_reward(double teacher_prob, double infer_prob, struct SdReward *out);

// Builds a base from a schema file and matrix file.
//
// # Safety
// Paths must be NUL-terminated; `out` must be valid. Release the handle
// with [`sd_acpb_free`].
enum SdStatus sd_acpb_extract(const char *schema_path,
                              const char *matrix_path,
                              double step,
                              struct SdAcpb **out);

// # Safety
// `path` must be NUL-terminated; `out` must be valid.
enum SdStatus sd_acpb_read(const char *path, struct SdAcpb **out);

// # Safety
// `acpb` must come from this library; `path` must be NUL-terminated.
enum SdStatus sd_acpb_write(const struct SdAcpb *acpb, const char *path);

// Number of features, or 0 for a null handle.
//
// # Safety
// `acpb` must be null or come from this library.
size_t sd_acpb_feature_count(const struct SdAcpb *acpb);

// # Safety
// `acpb` must be null or a handle not yet freed.
void sd_acpb_free(struct SdAcpb *acpb);

// Calibrates every row of the matrix with the deterministic stub policy
// and returns the resulting store. `max_iters` 0 means the default.
//
// # Safety
// `acpb` must come from this library; `matrix_path` NUL-terminated;
// `out_store` valid; `out_summary` may be null.
enum SdStatus sd_distill_stub(const struct SdAcpb *acpb,
                              const char *matrix_path,
                              double damping,
                              double epsilon,
                              size_t max_iters,
                              struct SdStore **out_store,
                              struct SdDistillSummary *out_summary);

// # Safety
// `path` must be NUL-terminated; `out` must be valid.
enum SdStatus sd_store_open(const char *path, struct SdStore **out);

// # Safety
// `store` must come from this library; `path` must be NUL-terminated.
enum SdStatus sd_store_persist(const struct SdStore *store, const char *path);

// Number of stored cases, or 0 for a null handle.
//
// # Safety
// `store` must be null or come from this library.
size_t sd_store_len(const struct SdStore *store);

// # Safety
// `store` must be null or a handle not yet freed.
void sd_store_free(struct SdStore *store);

// Voted prediction for one case given as raw feature values, using the
// stub policy and default retrieval settings.
//
// # Safety
// Handles must come from this library; `values` must point to `n`
// doubles; `out` must be valid.
enum SdStatus sd_predict_stub(const struct SdAcpb *acpb,
                              const struct SdStore *store,
                              const double *values,
                              size_t n,
                              size_t runs,
                              double damping,
                              struct SdPrediction *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHAPDISTILL_H */
