#ifndef TRYFLOW_H
#define TRYFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TfCategory {
  TF_CATEGORY_UPPER = 0,
  TF_CATEGORY_LOWER = 1,
  TF_CATEGORY_FULL = 2,
} TfCategory;

// Generation direction.
typedef enum TfMode {
  TF_MODE_ON = 0,
  TF_MODE_OFF = 1,
} TfMode;

// Status codes; the nonzero values match the library's error codes.
typedef enum TfStatus {
  TF_STATUS_OK = 0,
  // NaN or infinity where finite values are required.
  TF_STATUS_NUMERIC = 2,
  TF_STATUS_CONFIG = 3,
  TF_STATUS_USAGE = 4,
  // More tokens than the model's `n_max`.
  TF_STATUS_CAPACITY = 5,
  TF_STATUS_UNDEFINED_REGION = 6,
  // Malformed checkpoint or JSON.
  TF_STATUS_FORMAT = 7,
  TF_STATUS_IO = 8,
  TF_STATUS_NULL_POINTER = 9,
  // A Rust panic was caught at the boundary.
  TF_STATUS_PANIC = 10,
} TfStatus;

// Opaque model handle.
typedef struct TfModel TfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *tf_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call into this library on the same thread.
const char *tf_last_error(void);

// Fresh model. `config_json` is a model config object (missing keys take
// defaults) or NULL for the default config.
//
// # Safety
// `config_json` is NULL or a NUL-terminated string; `out` is writable.
enum TfStatus tf_model_init(const char *config_json, uint64_t seed, struct TfModel **out);

// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum TfStatus tf_model_load(const char *path, struct TfModel **out);

// # Safety
// `model` comes from this library; `path` is a NUL-terminated string.
enum TfStatus tf_model_save(const struct TfModel *model, const char *path);

// Releases a model; NULL is ignored.
//
// # Safety
// `model` is NULL or comes from this library and is not used afterwards.
void tf_model_free(struct TfModel *model);

// # Safety
// `model` comes from this library; `out` is writable.
enum TfStatus tf_model_parameter_count(const struct TfModel *model, uint64_t *out);

// Token-count-aware attention temperature.
//
// # Safety
// `out` is writable.
enum TfStatus tf_temperature(size_t head_dim,
                             size_t n_infer,
                             size_t n_train,
                             size_t n_mask,
                             size_t n_garment,
                             double alpha,
                             double beta,
                             double c,
                             double *out);

// Samples the masked half. `person_mask` may be NULL for try-off (mode 1).
// `steps` of 0 means the default schedule. `temp_scale` nonzero enables
// the temperature override with default constants. `out_canvas` receives
// `height * 2 * width * 3` floats.
//
// # Safety
// Buffers have the sizes described above; `model` comes from this library.
enum TfStatus tf_sample(const struct TfModel *model,
                        const float *garment,
                        const float *person,
                        const uint8_t *person_mask,
                        size_t height,
                        size_t width,
                        int32_t mode,
                        int32_t category,
                        size_t steps,
                        int32_t temp_scale,
                        uint64_t seed,
                        float *out_canvas);

// Try-on with the default self-correction plan. The garment-tight region
// is taken from the non-white pixels of the garment image.
//
// # Safety
// As for [`tf_sample`]; `person_mask` must not be NULL.
enum TfStatus tf_self_correct(const struct TfModel *model,
                              const float *garment,
                              const float *person,
                              const uint8_t *person_mask,
                              size_t height,
                              size_t width,
                              int32_t category,
                              size_t steps,
                              int32_t temp_scale,
                              uint64_t seed,
                              float *out_canvas);

// One synthetic pair: garment and person images (`height * width * 3`
// floats each) and the person-side garment mask (`height * width` bytes).
//
// # Safety
// Output buffers have the sizes described above.
enum TfStatus tf_gen_pair(uint64_t seed,
                          int32_t category,
                          size_t height,
                          size_t width,
                          float *out_garment,
                          float *out_person,
                          uint8_t *out_mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRYFLOW_H */
