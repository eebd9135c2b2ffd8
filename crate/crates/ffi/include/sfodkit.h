#ifndef SFODKIT_H
#define SFODKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define SFOD_METHOD_DEPF 0

#define SFOD_METHOD_NMS 1

#define SFOD_METHOD_WBF 2

#define SFOD_METHOD_RI 3

/**
 * Result code of every fallible call.
 */
typedef enum SfodStatus {
  SFOD_STATUS_OK = 0,
  SFOD_STATUS_NULL_POINTER = 1,
  SFOD_STATUS_INVALID_INPUT = 2,
  SFOD_STATUS_PARSE = 3,
  SFOD_STATUS_VALIDATION = 4,
  SFOD_STATUS_FORMAT = 5,
  SFOD_STATUS_TRUNCATED = 6,
  SFOD_STATUS_IO = 7,
  SFOD_STATUS_PANIC = 8,
} SfodStatus;

/**
 * Detections of one image: boxes with class probability vectors.
 */
typedef struct SfodDetections SfodDetections;

/**
 * Teacher parameters under an EMA schedule.
 */
typedef struct SfodEma SfodEma;

/**
 * Output of [`sfod_fuse`].
 */
typedef struct SfodFused SfodFused;

/**
 * Per-class momentum prototypes.
 */
typedef struct SfodPrototypeBank SfodPrototypeBank;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sfod_last_error(void);

/**
 * IoU of two `[x1, y1, x2, y2]` boxes.
 *
 * # Safety
 * `a` and `b` must point to 4 doubles; `out` must be writable.
 */
enum SfodStatus sfod_iou(const double *a, const double *b, double *out);

/**
 * Creates an empty detection list for `num_classes` classes.
 *
 * # Safety
 * `out` must be writable.
 */
enum SfodStatus sfod_detections_new(uintptr_t num_classes, struct SfodDetections **out);

/**
 * Appends a detection. `probs` must hold `num_classes` entries summing
 * to 1 within `1e-6`.
 *
 * # Safety
 * `dets` must be a live handle, `bbox` must point to 4 doubles and
 * `probs` to `num_probs` doubles.
 */
enum SfodStatus sfod_detections_push(struct SfodDetections *dets,
                                     const double *bbox,
                                     const double *probs,
                                     uintptr_t num_probs);

/**
 * Number of detections; 0 for NULL.
 *
 * # Safety
 * `dets` must be NULL or a live handle.
 */
uintptr_t sfod_detections_len(const struct SfodDetections *dets);

/**
 * # Safety
 * `dets` must be NULL or a handle not yet freed.
 */
void sfod_detections_free(struct SfodDetections *dets);

/**
 * Fuses two detection lists of one image. `method` is one of the
 * `SFOD_METHOD_*` constants; `beta` is the IoU threshold.
 *
 * # Safety
 * `a` and `b` must be live handles; `out` must be writable.
 */
enum SfodStatus sfod_fuse(const struct SfodDetections *a,
                          const struct SfodDetections *b,
                          uint32_t method,
                          double beta,
                          double epsilon,
                          struct SfodFused **out);

/**
 * Number of fused labels; 0 for NULL.
 *
 * # Safety
 * `fused` must be NULL or a live handle.
 */
uintptr_t sfod_fused_len(const struct SfodFused *fused);

/**
 * Number of clusters formed (surviving boxes for NMS); 0 for NULL.
 *
 * # Safety
 * `fused` must be NULL or a live handle.
 */
uintptr_t sfod_fused_clusters(const struct SfodFused *fused);

/**
 * Copies fused label `index`: the box into `bbox_out[4]`, the class
 * probabilities into `probs_out[num_probs]` and the class into `label_out`.
 *
 * # Safety
 * `fused` must be a live handle and the outputs writable for the given sizes.
 */
enum SfodStatus sfod_fused_get(const struct SfodFused *fused,
                               uintptr_t index,
                               double *bbox_out,
                               double *probs_out,
                               uintptr_t num_probs,
                               uintptr_t *label_out);

/**
 * # Safety
 * `fused` must be NULL or a handle not yet freed.
 */
void sfod_fused_free(struct SfodFused *fused);

/**
 * Patch weights of a `batch x patches x channels` feature tensor, written
 * to `out[batch * patches]`.
 *
 * # Safety
 * `features` must hold `batch * patches * channels` doubles and `out`
 * `batch * patches`.
 */
enum SfodStatus sfod_pgfa_weights(const double *features,
                                  uintptr_t batch,
                                  uintptr_t patches,
                                  uintptr_t channels,
                                  double tau,
                                  uintptr_t top_k,
                                  double epsilon,
                                  double *out);

/**
 * Weighted cosine alignment loss. `grad_out` may be NULL; otherwise it
 * receives the gradient with respect to `student`.
 *
 * # Safety
 * `vfm` and `student` must hold `batch * patches * channels` doubles, as
 * must `grad_out` when not NULL; `loss_out` must be writable.
 */
enum SfodStatus sfod_pgfa_loss(const double *vfm,
                               const double *student,
                               uintptr_t batch,
                               uintptr_t patches,
                               uintptr_t channels,
                               double tau,
                               uintptr_t top_k,
                               double epsilon,
                               double *loss_out,
                               double *grad_out);

/**
 * Creates an empty prototype bank.
 *
 * # Safety
 * `out` must be writable.
 */
enum SfodStatus sfod_bank_new(uintptr_t num_classes,
                              uintptr_t channels,
                              double momentum,
                              struct SfodPrototypeBank **out);

/**
 * Folds the per-class means of `count` labeled feature rows into the bank.
 *
 * # Safety
 * `bank` must be a live handle, `features` must hold `count * channels`
 * doubles and `labels` `count` entries.
 */
enum SfodStatus sfod_bank_update(struct SfodPrototypeBank *bank,
                                 const double *features,
                                 const uintptr_t *labels,
                                 uintptr_t count);

/**
 * Copies the prototype of `class` into `out[channels]` and reports whether
 * it has been initialized.
 *
 * # Safety
 * `bank` must be a live handle; `out` must hold `channels` doubles and
 * `initialized` must be writable.
 */
enum SfodStatus sfod_bank_prototype(const struct SfodPrototypeBank *bank,
                                    uintptr_t class_,
                                    double *out,
                                    uintptr_t channels,
                                    bool *initialized);

/**
 * Prototype InfoNCE loss of `count` labeled rows against the bank.
 * `grad_out` may be NULL; otherwise it receives `count * channels` values.
 *
 * # Safety
 * As for [`sfod_bank_update`]; `loss_out` must be writable.
 */
enum SfodStatus sfod_pifa_loss(const struct SfodPrototypeBank *bank,
                               const double *features,
                               const uintptr_t *labels,
                               uintptr_t count,
                               double tau,
                               double *loss_out,
                               double *grad_out);

/**
 * # Safety
 * `bank` must be NULL or a handle not yet freed.
 */
void sfod_bank_free(struct SfodPrototypeBank *bank);

/**
 * Creates an EMA state from `len` initial teacher parameters.
 *
 * # Safety
 * `teacher` must hold `len` doubles; `out` must be writable.
 */
enum SfodStatus sfod_ema_new(const double *teacher,
                             uintptr_t len,
                             double alpha,
                             uint64_t interval,
                             struct SfodEma **out);

/**
 * Advances the step counter and, on schedule, moves the teacher toward
 * `student`. `applied` (may be NULL) reports whether an update happened.
 *
 * # Safety
 * `ema` must be a live handle and `student` must hold `len` doubles.
 */
enum SfodStatus sfod_ema_step(struct SfodEma *ema,
                              const double *student,
                              uintptr_t len,
                              bool *applied);

/**
 * Copies the teacher parameters into `out[len]`.
 *
 * # Safety
 * `ema` must be a live handle and `out` must hold `len` doubles.
 */
enum SfodStatus sfod_ema_teacher(const struct SfodEma *ema, double *out, uintptr_t len);

/**
 * # Safety
 * `ema` must be NULL or a handle not yet freed.
 */
void sfod_ema_free(struct SfodEma *ema);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFODKIT_H */
