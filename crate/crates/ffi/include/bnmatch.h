#ifndef BNMATCH_H
#define BNMATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum BnmStatus {
  BNM_STATUS_OK = 0,
  BNM_STATUS_NULL_POINTER = 1,
  BNM_STATUS_INVALID_ARGUMENT = 2,
  BNM_STATUS_CONFIG = 3,
  BNM_STATUS_PARSE = 4,
  BNM_STATUS_IO = 5,
  BNM_STATUS_NUMERICAL = 6,
  BNM_STATUS_STATE = 7,
  BNM_STATUS_BUFFER_TOO_SMALL = 8,
  BNM_STATUS_PANIC = 9,
} BnmStatus;

// Opaque model handle.
typedef struct BnmModel BnmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a
// successful call. Valid until the next `bnm_*` call on the same thread.
const char *bnm_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *bnm_version(void);

// Fresh model. `topology_json` may be NULL for the default
// `2 -> 32 -> 16 -> 3` network.
enum BnmStatus bnm_model_new(const char *topology_json, uint64_t seed, struct BnmModel **out);

enum BnmStatus bnm_model_load(const char *path, struct BnmModel **out);

// Parses a checkpoint held in memory.
enum BnmStatus bnm_model_from_string(const char *text, struct BnmModel **out);

enum BnmStatus bnm_model_save(const struct BnmModel *model, const char *path);

// Serializes the model into `buf` (NUL-terminated). `*needed` receives the
// required size including the terminator; with a short or NULL buffer the
// call returns `BNM_STATUS_BUFFER_TOO_SMALL` and writes nothing else.
enum BnmStatus bnm_model_to_string(const struct BnmModel *model,
                                   char *buf,
                                   size_t len,
                                   size_t *needed);

// Releases a handle; NULL is ignored.
void bnm_model_free(struct BnmModel *model);

// Input width of the model, or 0 for NULL.
size_t bnm_model_input_dim(const struct BnmModel *model);

// Number of classes, or 0 for NULL.
size_t bnm_model_classes(const struct BnmModel *model);

// Class probabilities in inference mode. `probs` must hold
// `rows * classes` values.
enum BnmStatus bnm_model_predict(struct BnmModel *model,
                                 const double *x,
                                 size_t rows,
                                 size_t cols,
                                 double *probs,
                                 size_t probs_len);

// Fraction of rows whose argmax prediction equals the label.
enum BnmStatus bnm_model_evaluate(struct BnmModel *model,
                                  const double *x,
                                  const size_t *labels,
                                  size_t rows,
                                  size_t cols,
                                  double *accuracy);

// Supervised training of the whole model. `config_json` (may be NULL)
// follows the `pretrain` section of the runner config.
enum BnmStatus bnm_model_pretrain(struct BnmModel *model,
                                  const double *x,
                                  const size_t *labels,
                                  size_t rows,
                                  size_t cols,
                                  const char *config_json);

// Splits the model at its last BN layer, freezes the classifier and adapts
// the encoder on unlabeled `x`. `config_json` (may be NULL) follows the
// `adapt` section of the runner config. `final_loss`, if not NULL,
// receives the last total loss.
enum BnmStatus bnm_model_adapt(struct BnmModel *model,
                               const double *x,
                               size_t rows,
                               size_t cols,
                               const char *config_json,
                               double *final_loss);

// Channel-averaged Gaussian KL from the stored to the batch statistics;
// every array holds `channels` values.
enum BnmStatus bnm_bnm_loss(const double *batch_mean,
                            const double *batch_var,
                            const double *stored_mean,
                            const double *stored_var,
                            size_t channels,
                            double *out);

// Information-maximization loss of a `rows x classes` probability matrix.
enum BnmStatus bnm_im_loss(const double *probs, size_t rows, size_t classes, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BNMATCH_H */
