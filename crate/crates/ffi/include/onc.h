#ifndef ONC_H
#define ONC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OncStatus {
  ONC_STATUS_OK = 0,
  ONC_STATUS_NULL_POINTER = 1,
  ONC_STATUS_INVALID_ARGUMENT = 2,
  ONC_STATUS_NUMERICAL = 3,
  ONC_STATUS_BUFFER_TOO_SMALL = 4,
  ONC_STATUS_PANIC = 5,
} OncStatus;

// Values accepted wherever a `link` argument is expected.
typedef enum OncLink {
  ONC_LINK_LOGIT = 0,
  ONC_LINK_PROBIT = 1,
  ONC_LINK_CLOGLOG = 2,
} OncLink;

// Opaque problem handle.
typedef struct OncEosProblem OncEosProblem;

// Opaque solution handle.
typedef struct OncEosSolution OncEosSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Inverse link `g(x)`.
//
// # Safety
// `out` must be valid for one write.
enum OncStatus onc_link_cdf(uint32_t link, double x, double *out);

// Density `g'(x)`.
//
// # Safety
// `out` must be valid for one write.
enum OncStatus onc_link_density(uint32_t link, double x, double *out);

// Per-sample loss `-log(g(b - z) - g(a - z))`; `a` may be `-inf` and `b`
// may be `+inf`.
//
// # Safety
// `out` must be valid for one write.
enum OncStatus onc_nll_term(uint32_t link, double z, double a, double b, double *out);

// Build a problem from `num_thresholds = Q + 1` cut points and `Q` class
// proportions summing to one.
//
// # Safety
// `thresholds` and `alpha` must be valid for their lengths; `out` for one
// write.
enum OncStatus onc_eos_problem_new(uint32_t link,
                                   const double *thresholds,
                                   size_t num_thresholds,
                                   const double *alpha,
                                   size_t num_classes,
                                   double lambda_w,
                                   double lambda_h,
                                   struct OncEosProblem **out);

// # Safety
// `problem` must be null or a handle from [`onc_eos_problem_new`] not yet
// freed.
void onc_eos_problem_free(struct OncEosProblem *problem);

// Phase boundary constant `C`.
//
// # Safety
// `problem` must be a live handle; `out` valid for one write.
enum OncStatus onc_eos_phase_constant(const struct OncEosProblem *problem, double *out);

// # Safety
// `problem` must be a live handle; `out` valid for one write.
enum OncStatus onc_eos_solve(const struct OncEosProblem *problem, struct OncEosSolution **out);

// # Safety
// `solution` must be null or a handle from [`onc_eos_solve`] not yet freed.
void onc_eos_solution_free(struct OncEosSolution *solution);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `solution` must be null or a live handle.
size_t onc_eos_solution_num_classes(const struct OncEosSolution *solution);

// # Safety
// `solution` must be a live handle; `out` valid for one write.
enum OncStatus onc_eos_solution_w_star(const struct OncEosSolution *solution, double *out);

// # Safety
// `solution` must be a live handle; `out` valid for one write.
enum OncStatus onc_eos_solution_objective(const struct OncEosSolution *solution, double *out);

// Writes 1 for the trivial phase and 0 otherwise.
//
// # Safety
// `solution` must be a live handle; `out` valid for one write.
enum OncStatus onc_eos_solution_is_trivial(const struct OncEosSolution *solution, int32_t *out);

// Copies the optimal latents into `buf`, which must hold at least
// [`onc_eos_solution_num_classes`] values.
//
// # Safety
// `solution` must be a live handle; `buf` valid for `len` writes.
enum OncStatus onc_eos_solution_z_star(const struct OncEosSolution *solution,
                                       double *buf,
                                       size_t len);

// Ordinal spacing indicator for class-mean latents `z_means` (length `Q`,
// NaN for absent classes) against `Q + 1` thresholds.
//
// # Safety
// Input pointers must be valid for their lengths; `out` for one write.
enum OncStatus onc_onc3(const double *z_means,
                        size_t num_classes,
                        const double *thresholds,
                        size_t num_thresholds,
                        double *out);

// Copies the calling thread's last error message, NUL-terminated and
// truncated to fit, into `buf`. Returns the full message length plus one,
// or 0 when there is no error. A null `buf` only queries the length.
//
// # Safety
// `buf` must be null or valid for `len` writes.
size_t onc_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *onc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ONC_H */
