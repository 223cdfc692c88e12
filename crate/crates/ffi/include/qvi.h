#ifndef QVI_H
#define QVI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum QviStatus {
  QviStatus_Ok = 0,
  QviStatus_NullArgument = 1,
  QviStatus_InvalidUtf8 = 2,
  QviStatus_ConfigError = 3,
  QviStatus_GridMissing = 4,
  QviStatus_SolveFailed = 5,
  QviStatus_IterationFailed = 6,
  QviStatus_ValidationFailed = 7,
  QviStatus_Panic = 8,
} QviStatus;

/**
 * Opaque solved value function.
 */
typedef struct QviField QviField;

/**
 * Opaque problem handle: a parsed model file plus its grid and options.
 */
typedef struct QviProblem QviProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses a model document (the same format the `qvi` CLI reads) into a
 * problem handle. On success writes the handle to `out`.
 *
 * # Safety
 * `config_text` must be a valid NUL-terminated string and `out` a valid
 * pointer. The returned handle must be released with `qvi_problem_free`.
 */
enum QviStatus qvi_problem_parse(const char *config_text, struct QviProblem **out);

/**
 * Releases a problem handle. A null pointer is ignored.
 *
 * # Safety
 * `p` must have been returned by `qvi_problem_parse` and not freed before.
 */
void qvi_problem_free(struct QviProblem *p);

/**
 * State dimension of the model, or -1 on a null handle.
 *
 * # Safety
 * `p` must be a live handle from `qvi_problem_parse` or null.
 */
int32_t qvi_problem_dimension(const struct QviProblem *p);

/**
 * Runs the static assumption checks and the no-free-loop enumeration with
 * the model's bundled validation options. Writes 1 to `out_pass` when every
 * check passes, 0 otherwise.
 *
 * # Safety
 * `p` must be a live handle; `out_pass` must be a valid pointer.
 */
enum QviStatus qvi_validate(const struct QviProblem *p, uint64_t seed, int32_t *out_pass);

/**
 * Solves the penalized problem at level `n`.
 *
 * # Safety
 * `p` must be a live handle; `out` must be valid. The returned field must
 * be released with `qvi_field_free`.
 */
enum QviStatus qvi_solve_penalized(const struct QviProblem *p, double n, struct QviField **out);

/**
 * Solves the double-obstacle problem.
 *
 * # Safety
 * As `qvi_solve_penalized`.
 */
enum QviStatus qvi_solve_double(const struct QviProblem *p, struct QviField **out);

/**
 * Picard iteration for the driver with intervention weight `k_nl`. Writes
 * the converged field and the iteration count.
 *
 * # Safety
 * `p` live handle; `out` and `out_iterations` valid pointers.
 */
enum QviStatus qvi_picard_solve(const struct QviProblem *p,
                                double k_nl,
                                double tol,
                                uint32_t kmax,
                                struct QviField **out,
                                uint32_t *out_iterations);

/**
 * Releases a field handle. A null pointer is ignored.
 *
 * # Safety
 * `f` must have been returned by a solve call and not freed before.
 */
void qvi_field_free(struct QviField *f);

/**
 * Interpolated field value at (t, x). `x` points to `x_len` coordinates,
 * which must equal the model dimension.
 *
 * # Safety
 * `f` live field handle; `x` valid for `x_len` reads; `out` valid.
 */
enum QviStatus qvi_field_value_at(const struct QviField *f,
                                  double t,
                                  const double *x,
                                  uintptr_t x_len,
                                  double *out);

/**
 * Number of time slices in a field (time_steps + 1), or 0 on null.
 *
 * # Safety
 * `f` must be a live field handle or null.
 */
uint64_t qvi_field_num_slices(const struct QviField *f);

/**
 * Writes the field CSV (`t,x1[,x2],v`) to `path`.
 *
 * # Safety
 * `f` live field handle; `path` a valid NUL-terminated string.
 */
enum QviStatus qvi_field_write_csv(const struct QviField *f, const char *path);

/**
 * Cox-Ross-Rubinstein American put at spot = strike.
 */
double qvi_binomial_oracle(double rate, double vol, double strike, double horizon, uint32_t steps);

/**
 * Copies the last error message into `buf` (truncating to `len - 1` bytes,
 * always NUL-terminated when `len > 0`) and returns the full message length
 * in bytes excluding the terminator.
 *
 * # Safety
 * `buf` must be valid for `len` writes, or null (to query the length).
 */
uintptr_t qvi_last_error(char *buf, uintptr_t len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* QVI_H */
