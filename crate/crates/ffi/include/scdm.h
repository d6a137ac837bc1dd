#ifndef SCDM_H
#define SCDM_H

/* Generated by cbindgen from the scdm-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SCDM_OK 0

/**
 * A required pointer argument was null.
 */
#define SCDM_ERR_NULL 1

/**
 * A string argument was not valid UTF-8.
 */
#define SCDM_ERR_UTF8 2

/**
 * The model source or file did not lower.
 */
#define SCDM_ERR_MODEL 3

/**
 * A solver or analysis step failed.
 */
#define SCDM_ERR_SOLVE 4

/**
 * The model declares no recurring process.
 */
#define SCDM_ERR_NO_PROCESS 5

/**
 * Value iteration stopped before reaching the tolerance; the result is still returned.
 */
#define SCDM_ERR_NOT_CONVERGED 6

/**
 * An index was out of range.
 */
#define SCDM_ERR_RANGE 7

/**
 * The output buffer was too small; the required size was reported.
 */
#define SCDM_ERR_BUFFER 8

/**
 * Internal failure.
 */
#define SCDM_ERR_PANIC 9

/**
 * A lowered model.
 */
typedef struct ScdmModel ScdmModel;

/**
 * A value table with its text rendering and work count.
 */
typedef struct ScdmSolution ScdmSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, copied into `buf`.
 *
 * # Safety
 * `buf` must point to `len` writable bytes or be null; `needed` may be null.
 */
int32_t scdm_last_error(char *buf, size_t len, size_t *needed);

/**
 * Lowers model source text.
 *
 * # Safety
 * `src` must be a NUL-terminated string; `out` must be writable.
 */
int32_t scdm_model_from_source(const char *src, ScdmModel **out);

/**
 * Loads and lowers a model file, resolving imports relative to it.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
int32_t scdm_model_from_file(const char *path, ScdmModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `m` must come from this library and not be used afterwards.
 */
void scdm_model_free(ScdmModel *m);

/**
 * Number of variables in the model.
 *
 * # Safety
 * `m` must be a live model; `out` must be writable.
 */
int32_t scdm_model_variable_count(const ScdmModel *m, size_t *out);

/**
 * Canonical source text of the model.
 *
 * # Safety
 * `m` must be a live model; `buf` must point to `len` writable bytes or be null.
 */
int32_t scdm_model_emit(const ScdmModel *m, char *buf, size_t len, size_t *needed);

/**
 * Checks a comma-separated bridge; null uses the declared one. Writes 1
 * to `orthomodular` when the decomposition is orthomodular, else 0.
 *
 * # Safety
 * `m` must be a live model; `bridge` null or NUL-terminated; `orthomodular` writable.
 */
int32_t scdm_check_bridge(const ScdmModel *m, const char *bridge, int32_t *orthomodular);

/**
 * Solves the static model over its root grid, through the declared
 * bridge when it is orthomodular unless `force_enumerate` is nonzero.
 *
 * # Safety
 * `m` must be a live model; `out` must be writable.
 */
int32_t scdm_solve(const ScdmModel *m, int32_t force_enumerate, ScdmSolution **out);

/**
 * Value iteration on the model's recurring process. When the tolerance
 * is not reached the result is still stored and the status is
 * `SCDM_ERR_NOT_CONVERGED`.
 *
 * # Safety
 * `m` must be a live model; `out` must be writable.
 */
int32_t scdm_iterate(const ScdmModel *m, double tol, size_t max_iter, ScdmSolution **out);

/**
 * Number of grid points in the value table.
 *
 * # Safety
 * `s` must be a live solution; `out` must be writable.
 */
int32_t scdm_solution_len(const ScdmSolution *s, size_t *out);

/**
 * Value at grid point `index`.
 *
 * # Safety
 * `s` must be a live solution; `out` must be writable.
 */
int32_t scdm_solution_value(const ScdmSolution *s, size_t index, double *out);

/**
 * Policy evaluations (static) or joint-action evaluations (dynamic) spent.
 *
 * # Safety
 * `s` must be a live solution; `out` must be writable.
 */
int32_t scdm_solution_evaluations(const ScdmSolution *s, uint64_t *out);

/**
 * The value table as comma-separated text.
 *
 * # Safety
 * `s` must be a live solution; `buf` must point to `len` writable bytes or be null.
 */
int32_t scdm_solution_table(const ScdmSolution *s, char *buf, size_t len, size_t *needed);

/**
 * Releases a solution. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void scdm_solution_free(ScdmSolution *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCDM_H */
