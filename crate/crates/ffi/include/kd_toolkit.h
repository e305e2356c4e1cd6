#ifndef KD_TOOLKIT_H
#define KD_TOOLKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum KdStatus {
  KD_STATUS_OK = 0,
  KD_STATUS_INVALID_ARGUMENT = 1,
  KD_STATUS_SHAPE_MISMATCH = 2,
  KD_STATUS_CONFIG = 3,
  KD_STATUS_CORRUPT = 4,
  KD_STATUS_NUMERICAL = 5,
  KD_STATUS_IO = 6,
  KD_STATUS_NULL_POINTER = 7,
  KD_STATUS_PANIC = 8,
} KdStatus;

typedef enum KdSpecKind {
  KD_SPEC_KIND_KD = 0,
  KD_SPEC_KIND_KA = 1,
  KD_SPEC_KIND_DTD = 2,
  KD_SPEC_KIND_DTD_KA = 3,
} KdSpecKind;

typedef enum KdAdjust {
  KD_ADJUST_NONE = 0,
  KD_ADJUST_LSR = 1,
  KD_ADJUST_PROBABILITY_SHIFT = 2,
} KdAdjust;

typedef enum KdWeights {
  KD_WEIGHTS_FLSW = 0,
  KD_WEIGHTS_CWSM = 1,
} KdWeights;

/*
 Opaque logit matrix handle.
 */
typedef struct KdLogits KdLogits;

/*
 Opaque network handle.
 */
typedef struct KdNetwork KdNetwork;

/*
 Loss selection. Fields a given `kind` does not use are ignored.
 */
typedef struct KdLossSpec {
  enum KdSpecKind kind;
  /*
   Fixed temperature (KD, KA).
   */
  double tau;
  /*
   Weight of the soft term (KD, DTD).
   */
  double alpha;
  /*
   Target adjustment (KA, DTD-KA).
   */
  enum KdAdjust adjust;
  /*
   LSR smoothing strength.
   */
  double epsilon;
  /*
   Sample weighting (DTD, DTD-KA).
   */
  enum KdWeights weights;
  double gamma;
  double tau0;
  double beta;
  double tau_min;
} KdLossSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread. Valid until the next
 failing call on the same thread. Empty if nothing failed yet.
 */
const char *kd_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *kd_version(void);

/*
 `softmax(logits / tau)` row by row into `out` (`n × k`).
 */
enum KdStatus kd_softmax_tau(const double *logits_ptr, size_t n, size_t k, double tau, double *out);

/*
 Summed batch loss and, if `grad_out` is non-null, its gradient with respect
 to the student logits (`n × k`).
 */
enum KdStatus kd_loss_and_grad(const struct KdLossSpec *spec,
                               const double *student,
                               const double *teacher,
                               const size_t *labels_ptr,
                               size_t n,
                               size_t k,
                               double *loss_out,
                               double *grad_out);

/*
 Counts student errors and those that repeat the teacher's prediction.
 */
enum KdStatus kd_genetic_errors(const double *student,
                                const double *teacher,
                                const size_t *labels_ptr,
                                size_t n,
                                size_t k,
                                size_t *genetic_out,
                                size_t *total_out,
                                double *ratio_out);

/*
 Loads a network checkpoint. On success `*out` owns a new handle.
 */
enum KdStatus kd_network_load(const char *path, struct KdNetwork **out);

size_t kd_network_input_dim(const struct KdNetwork *net);

size_t kd_network_output_dim(const struct KdNetwork *net);

/*
 Logits for `n` inputs of width `d` into `out` (`n × output_dim`).
 */
enum KdStatus kd_network_forward(const struct KdNetwork *net,
                                 const double *inputs,
                                 size_t n,
                                 size_t d,
                                 double *out);

void kd_network_free(struct KdNetwork *net);

/*
 Loads a teacher-logit file. On success `*out` owns a new handle.
 */
enum KdStatus kd_logits_load(const char *path, struct KdLogits **out);

size_t kd_logits_rows(const struct KdLogits *l);

size_t kd_logits_cols(const struct KdLogits *l);

/*
 Copies the matrix into `out`, which must hold `len >= rows × cols` values.
 */
enum KdStatus kd_logits_copy(const struct KdLogits *l, double *out, size_t len);

void kd_logits_free(struct KdLogits *l);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KD_TOOLKIT_H */
