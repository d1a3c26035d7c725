/* C interface for the kvbits KV-cache bit allocation library. */

#ifndef KVBITS_H
#define KVBITS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum kvbits_status {
  KVBITS_STATUS_OK = 0,
  KVBITS_STATUS_NULL_ARGUMENT = 1,
  KVBITS_STATUS_INVALID_UTF8 = 2,
  KVBITS_STATUS_INVALID_ARGUMENT = 3,
  KVBITS_STATUS_PARSE_ERROR = 4,
  KVBITS_STATUS_CALIBRATION_FAILURE = 5,
  KVBITS_STATUS_INFEASIBLE = 6,
  KVBITS_STATUS_IO_ERROR = 7,
  KVBITS_STATUS_INTERNAL_ERROR = 8,
} kvbits_status;

// Opaque solved bit-allocation table.
typedef struct kvbits_allocation_t kvbits_allocation_t;

// Opaque exponential distortion model.
typedef struct kvbits_model_t kvbits_model_t;

// Opaque per-head sensitivity map.
typedef struct kvbits_sensitivity_t kvbits_sensitivity_t;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version string; static storage, do not free.
const char *kvbits_version(void);

// Message for the most recent failure on this thread; valid until the next
// failing call on the same thread. Do not free.
const char *kvbits_last_error(void);

// Load and validate a sensitivity JSON file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum kvbits_status kvbits_sensitivity_load(const char *path, struct kvbits_sensitivity_t **out);

// Draw a synthetic log-normal sensitivity map (`ln w ~ N(mu, sigma^2)`).
//
// # Safety
// `out` must be a valid pointer.
enum kvbits_status kvbits_sensitivity_synth(size_t num_layers,
                                            size_t num_kv_heads,
                                            double mu,
                                            double sigma,
                                            uint64_t seed,
                                            struct kvbits_sensitivity_t **out);

// Write a sensitivity map back to JSON.
//
// # Safety
// `sens` must be a live handle; `path` a NUL-terminated string.
enum kvbits_status kvbits_sensitivity_save(const struct kvbits_sensitivity_t *sens,
                                           const char *path);

// Layer and head counts of a map.
//
// # Safety
// All pointers must be valid.
enum kvbits_status kvbits_sensitivity_dims(const struct kvbits_sensitivity_t *sens,
                                           size_t *num_layers,
                                           size_t *num_kv_heads);

// AM/GM gain-ratio predictor over all 2N weights.
//
// # Safety
// All pointers must be valid.
enum kvbits_status kvbits_sensitivity_gain_ratio(const struct kvbits_sensitivity_t *sens,
                                                 double *out);

// Release a sensitivity handle. Null is ignored.
//
// # Safety
// `sens` must be a handle from this library, freed at most once.
void kvbits_sensitivity_free(struct kvbits_sensitivity_t *sens);

// Least-squares fit of `D(b) = alpha * beta^(-b)` from parallel
// `bits`/`mse` arrays of length `len`.
//
// # Safety
// `bits` and `mse` must point to `len` readable doubles; `out` must be
// valid.
enum kvbits_status kvbits_model_fit(const double *bits,
                                    const double *mse,
                                    size_t len,
                                    struct kvbits_model_t **out);

// Build a model from known coefficients.
//
// # Safety
// `out` must be a valid pointer.
enum kvbits_status kvbits_model_from_params(double alpha, double beta, struct kvbits_model_t **out);

// Load a model JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` valid.
enum kvbits_status kvbits_model_load(const char *path, struct kvbits_model_t **out);

// Write a model JSON file under the given quantizer/component labels.
//
// # Safety
// All pointer arguments must be valid NUL-terminated strings/handles.
enum kvbits_status kvbits_model_save(const struct kvbits_model_t *model,
                                     const char *quantizer,
                                     const char *component,
                                     const char *path);

// Read back `alpha`, `beta` and the fit quality. Null outputs are skipped.
//
// # Safety
// `model` must be a live handle.
enum kvbits_status kvbits_model_params(const struct kvbits_model_t *model,
                                       double *alpha,
                                       double *beta,
                                       double *r_squared);

// Evaluate `D(bits)`.
//
// # Safety
// `model` must be a live handle; `out` valid.
enum kvbits_status kvbits_model_eval(const struct kvbits_model_t *model, double bits, double *out);

// Release a model handle. Null is ignored.
//
// # Safety
// `model` must be a handle from this library, freed at most once.
void kvbits_model_free(struct kvbits_model_t *model);

// Exact per-element MSE of the optimal `2^bits`-level Gaussian scalar
// quantizer, `bits` in 1..=8.
//
// # Safety
// `out` must be a valid pointer.
enum kvbits_status kvbits_lloyd_max_mse(uint32_t bits, double *out);

// Greedy integer allocation over 2N independent key/value components.
//
// # Safety
// All handles must be live; `out` valid.
enum kvbits_status kvbits_allocate_separate(const struct kvbits_sensitivity_t *sens,
                                            const struct kvbits_model_t *model_k,
                                            const struct kvbits_model_t *model_v,
                                            double avg_bits,
                                            uint32_t b_min,
                                            uint32_t b_max,
                                            struct kvbits_allocation_t **out);

// Greedy integer allocation with one shared per-head bit-width for both
// caches.
//
// # Safety
// All handles must be live; `out` valid.
enum kvbits_status kvbits_allocate_joint(const struct kvbits_sensitivity_t *sens,
                                         const struct kvbits_model_t *model,
                                         double avg_bits,
                                         uint32_t b_min,
                                         uint32_t b_max,
                                         struct kvbits_allocation_t **out);

// Per-side means, achieved objective and predicted gain ratio. Null outputs
// are skipped.
//
// # Safety
// `alloc` must be a live handle.
enum kvbits_status kvbits_allocation_summary(const struct kvbits_allocation_t *alloc,
                                             double *mean_bits_k,
                                             double *mean_bits_v,
                                             double *objective,
                                             double *predicted_gain_ratio);

// Total bit budget of the allocation.
//
// # Safety
// `alloc` must be a live handle; `out` valid.
enum kvbits_status kvbits_allocation_budget(const struct kvbits_allocation_t *alloc, int64_t *out);

// Bit-width for one (layer, head) entry; `side` 0 selects keys, 1 values.
//
// # Safety
// `alloc` must be a live handle; `out` valid.
enum kvbits_status kvbits_allocation_bits(const struct kvbits_allocation_t *alloc,
                                          int side,
                                          size_t layer,
                                          size_t head,
                                          uint32_t *out);

// Write the allocation lookup table JSON.
//
// # Safety
// `alloc` must be a live handle; `path` a NUL-terminated string.
enum kvbits_status kvbits_allocation_save(const struct kvbits_allocation_t *alloc,
                                          const char *path);

// Release an allocation handle. Null is ignored.
//
// # Safety
// `alloc` must be a handle from this library, freed at most once.
void kvbits_allocation_free(struct kvbits_allocation_t *alloc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KVBITS_H */
