#ifndef AUGICL_H
#define AUGICL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum AugiclStatus {
  AUGICL_STATUS_OK = 0,
  AUGICL_STATUS_NULL_POINTER = 1,
  AUGICL_STATUS_INVALID_ARGUMENT = 2,
  AUGICL_STATUS_LAYOUT_MISMATCH = 3,
  AUGICL_STATUS_NUMERICAL_OVERFLOW = 4,
  AUGICL_STATUS_FORMAT = 5,
  AUGICL_STATUS_IO = 6,
  AUGICL_STATUS_BUFFER_TOO_SMALL = 7,
  AUGICL_STATUS_PANIC = 8,
} AugiclStatus;

/**
 * Reference trajectory kind for [`augicl_reference_rollout`] and the loss calls.
 */
typedef enum AugiclRefMode {
  AUGICL_REF_MODE_EMPIRICAL_EM = 0,
  AUGICL_REF_MODE_FIXED_TRUTH = 1,
} AugiclRefMode;

/**
 * Opaque task instance.
 */
typedef struct AugiclInstance AugiclInstance;

/**
 * Opaque transformer parameters.
 */
typedef struct AugiclTransformer AugiclTransformer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *augicl_version(void);

/**
 * Message of the last failed call on this thread, empty after a success.
 * Valid until the next augicl call on the same thread.
 */
const char *augicl_last_error(void);

/**
 * Draw an instance from the `(seed)` instance stream.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum AugiclStatus augicl_instance_sample(uintptr_t dim,
                                         uintptr_t classes,
                                         uintptr_t n_labeled,
                                         uintptr_t n_unlabeled,
                                         double sigma2,
                                         uint64_t seed,
                                         struct AugiclInstance **out);

/**
 * Parse an instance from its JSON form.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` must be writable.
 */
enum AugiclStatus augicl_instance_from_json(const char *json, struct AugiclInstance **out);

/**
 * Serialize an instance. Release the string with [`augicl_string_free`].
 *
 * # Safety
 * `inst` must come from this library; `out` must be writable.
 */
enum AugiclStatus augicl_instance_to_json(const struct AugiclInstance *inst, char **out);

/**
 * Shape of an instance. Any output pointer may be null.
 *
 * # Safety
 * `inst` must come from this library.
 */
enum AugiclStatus augicl_instance_dims(const struct AugiclInstance *inst,
                                       uintptr_t *dim,
                                       uintptr_t *classes,
                                       uintptr_t *n_labeled,
                                       uintptr_t *n_unlabeled);

/**
 * Copy the true class means (`d x C`, column-major) into `buf`.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum AugiclStatus augicl_instance_true_means(const struct AugiclInstance *inst,
                                             double *buf,
                                             uintptr_t len);

/**
 * # Safety
 * `inst` must come from this library and not be used afterwards. Null is ignored.
 */
void augicl_instance_free(struct AugiclInstance *inst);

/**
 * # Safety
 * `s` must come from this library. Null is ignored.
 */
void augicl_string_free(char *s);

/**
 * Build the EM transformer for prompts with `n_labeled` labeled and
 * `n_unlabeled` unlabeled samples. `w` is `d x d`, column-major.
 *
 * # Safety
 * `w` must hold `dim * dim` doubles; `out` must be writable.
 */
enum AugiclStatus augicl_transformer_build(uintptr_t dim,
                                           uintptr_t classes,
                                           const double *w,
                                           double beta,
                                           double alpha,
                                           double t_prime,
                                           uintptr_t n_labeled,
                                           uintptr_t n_unlabeled,
                                           struct AugiclTransformer **out);

/**
 * Load parameters saved by `augicl train`/`sweep` or [`augicl_transformer_save`].
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum AugiclStatus augicl_transformer_load(const char *path, struct AugiclTransformer **out);

/**
 * # Safety
 * `t` must come from this library; `path` must be NUL-terminated.
 */
enum AugiclStatus augicl_transformer_save(const struct AugiclTransformer *t, const char *path);

/**
 * # Safety
 * `t` must come from this library and not be used afterwards. Null is ignored.
 */
void augicl_transformer_free(struct AugiclTransformer *t);

/**
 * Run `t_steps` CoT steps and write the `t_steps + 1` mean estimates
 * (`d x C` each, column-major, step 0 first) into `buf`.
 *
 * # Safety
 * Handles must come from this library; `buf` must hold `len` doubles.
 */
enum AugiclStatus augicl_cot_rollout(const struct AugiclTransformer *t,
                                     const struct AugiclInstance *inst,
                                     uintptr_t t_steps,
                                     double *buf,
                                     uintptr_t len);

/**
 * Reference EM trajectory in the same layout as [`augicl_cot_rollout`].
 *
 * # Safety
 * `inst` must come from this library; `buf` must hold `len` doubles.
 */
enum AugiclStatus augicl_reference_rollout(const struct AugiclInstance *inst,
                                           uintptr_t t_steps,
                                           double alpha,
                                           double t_prime,
                                           enum AugiclRefMode mode,
                                           double *buf,
                                           uintptr_t len);

/**
 * Nearest-mean labels of the unlabeled samples given `d x C` estimates.
 *
 * # Safety
 * `means` must hold `d * C` doubles; `labels` must hold `len` entries.
 */
enum AugiclStatus augicl_predict_labels(const struct AugiclInstance *inst,
                                        const double *means,
                                        uintptr_t *labels,
                                        uintptr_t len);

/**
 * Teacher-forced CoT loss of `w` against a `t_steps` reference trajectory.
 *
 * # Safety
 * `w` must hold `d * d` doubles; `loss` must be writable.
 */
enum AugiclStatus augicl_cot_loss(const struct AugiclInstance *inst,
                                  const double *w,
                                  uintptr_t t_steps,
                                  double alpha,
                                  double t_prime,
                                  enum AugiclRefMode mode,
                                  double *loss);

/**
 * Gradient of [`augicl_cot_loss`] with respect to `w` (`d x d`, column-major).
 *
 * # Safety
 * `w` must hold `d * d` doubles; `grad` must hold `len` doubles.
 */
enum AugiclStatus augicl_cot_loss_grad(const struct AugiclInstance *inst,
                                       const double *w,
                                       uintptr_t t_steps,
                                       double alpha,
                                       double t_prime,
                                       enum AugiclRefMode mode,
                                       double *grad,
                                       uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUGICL_H */
