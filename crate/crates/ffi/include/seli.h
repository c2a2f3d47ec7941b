#ifndef SELI_H
#define SELI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SeliStatus {
  SELI_STATUS_OK = 0,
  SELI_STATUS_NULL_POINTER = 1,
  SELI_STATUS_INVALID_SPEC = 2,
  SELI_STATUS_DIMENSION = 3,
  SELI_STATUS_UNSUPPORTED = 4,
  SELI_STATUS_CERTIFICATE = 5,
  SELI_STATUS_DEGENERATE = 6,
  SELI_STATUS_NON_FINITE = 7,
  SELI_STATUS_CONFIG = 8,
  SELI_STATUS_IO = 9,
  SELI_STATUS_BUFFER_TOO_SMALL = 10,
  SELI_STATUS_PANIC = 11,
} SeliStatus;

/**
 * Compact SVD factors of a SEL matrix.
 */
typedef struct SeliFactors SeliFactors;

/**
 * STEP imbalance parameters.
 */
typedef struct SeliSpec SeliSpec;

typedef struct SeliCertificate {
  double spectral_norm;
  double row_sum_residual;
  double min_sign_agreement;
  size_t min_sign_example;
  size_t min_sign_class;
  double trace_gap;
  /**
   * 1 when every condition holds.
   */
  int32_t valid;
} SeliCertificate;

/**
 * Closed-form geometry; cosines between classes of one kind are NaN when
 * only one such class exists.
 */
typedef struct SeliGeometry {
  double norm_w_maj2;
  double norm_w_min2;
  double norm_h_maj2;
  double norm_h_min2;
  double cos_w_majmaj;
  double cos_w_minmin;
  double cos_w_majmin;
  double cos_h_majmaj;
  double cos_h_minmin;
  double cos_h_majmin;
  double align_maj;
  double align_min;
} SeliGeometry;

typedef struct SeliSolveInfo {
  double objective;
  double kkt_residual;
  double min_margin;
  size_t iterations;
  size_t rank;
  /**
   * 1 when the KKT residual reached the tolerance.
   */
  int32_t converged;
} SeliSolveInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the thread's last error message, NUL-terminated and truncated to
 * `capacity`, and returns the full length in bytes without the terminator
 * (0 when there is no error).
 */
size_t seli_last_error_message(char *buf, size_t capacity);

/**
 * Library version as a static NUL-terminated string.
 */
const char *seli_version(void);

enum SeliStatus seli_spec_new(size_t k, double r, double rho, size_t n_min, struct SeliSpec **out);

void seli_spec_free(struct SeliSpec *spec);

/**
 * Number of examples, or 0 for a null handle.
 */
size_t seli_spec_n(const struct SeliSpec *spec);

/**
 * Writes the k x n SEL matrix.
 */
enum SeliStatus seli_sel_matrix(const struct SeliSpec *spec,
                                double *buf,
                                size_t capacity,
                                size_t *needed);

enum SeliStatus seli_factors_closed_form(const struct SeliSpec *spec, struct SeliFactors **out);

void seli_factors_free(struct SeliFactors *f);

/**
 * Rank k-1 of the factors, or 0 for a null handle.
 */
size_t seli_factors_rank(const struct SeliFactors *f);

enum SeliStatus seli_factors_singular_values(const struct SeliFactors *f,
                                             double *buf,
                                             size_t capacity,
                                             size_t *needed);

/**
 * Class-side factor, k x (k-1).
 */
enum SeliStatus seli_factors_v(const struct SeliFactors *f,
                               double *buf,
                               size_t capacity,
                               size_t *needed);

/**
 * Example-side factor, n x (k-1).
 */
enum SeliStatus seli_factors_u(const struct SeliFactors *f,
                               double *buf,
                               size_t capacity,
                               size_t *needed);

/**
 * Diagnoses `B = U V^T` against the spec's SEL matrix. An invalid
 * certificate is reported through `valid`, not the status.
 */
enum SeliStatus seli_certificate(const struct SeliSpec *spec,
                                 const struct SeliFactors *f,
                                 struct SeliCertificate *out);

enum SeliStatus seli_geometry(size_t k, double r, struct SeliGeometry *out);

/**
 * Imbalance ratio above which minority classifiers collapse.
 */
double seli_minority_collapse_threshold(size_t k, double rho, double lambda);

/**
 * Solves the nuclear-norm regularized CE program and writes the k x n
 * solution. `tol <= 0` and `max_iter == 0` select the defaults.
 */
enum SeliStatus seli_solve(const struct SeliSpec *spec,
                           double lambda,
                           double tol,
                           size_t max_iter,
                           double *buf,
                           size_t capacity,
                           size_t *needed,
                           struct SeliSolveInfo *info);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELI_H */
