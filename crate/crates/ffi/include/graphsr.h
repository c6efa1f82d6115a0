/* C interface for the graphsr depth super-resolution library. */

#ifndef GRAPHSR_H
#define GRAPHSR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum {
  /**
   * Success.
   */
  GSR_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  GSR_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or inconsistent (sizes, scale, lambda).
   */
  GSR_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read or parsed.
   */
  GSR_STATUS_IO = 3,
  /**
   * The solver broke down or produced non-finite values.
   */
  GSR_STATUS_NUMERICAL = 4,
} GsrStatus;

/**
 * Opaque result of a solve: the high-resolution depth map plus solver
 * statistics. Free with [`gsr_solution_free`].
 */
typedef struct GsrSolution GsrSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *gsr_version(void);

/**
 * Message describing the most recent error on the calling thread. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *gsr_last_error_message(void);

/**
 * Solves guided depth super-resolution.
 *
 * - `guide`: planar `channels x guide_height x guide_width` buffer,
 *   values expected in [0, 1]
 * - `source`: `source_height x source_width` low-resolution depth
 * - `source_mask`: optional (may be null) `source_height x source_width`
 *   buffer, zero marking invalid source pixels
 * - `scale`: upsampling factor; guide dimensions must equal source
 *   dimensions times `scale`
 * - `rel_tol <= 0` and `max_iter == 0` select the library defaults
 * - `params_path`: optional path to a trained feature-network parameter
 *   file; null selects hand-crafted colour features
 * - `out`: receives a handle that must be freed with [`gsr_solution_free`]
 *
 * # Safety
 * Pointers must be null or valid for the stated extents; `params_path`
 * must be null or a nul-terminated string.
 */
GsrStatus gsr_solve_depth(const double *guide,
                          uintptr_t channels,
                          uintptr_t guide_height,
                          uintptr_t guide_width,
                          const double *source,
                          const uint8_t *source_mask,
                          uintptr_t source_height,
                          uintptr_t source_width,
                          uintptr_t scale,
                          double lambda,
                          double rel_tol,
                          uintptr_t max_iter,
                          const char *params_path,
                          GsrSolution **out);

/**
 * Height of the solved depth map, or 0 for a null handle.
 */
uintptr_t gsr_solution_height(const GsrSolution *sol);

/**
 * Width of the solved depth map, or 0 for a null handle.
 */
uintptr_t gsr_solution_width(const GsrSolution *sol);

/**
 * Number of conjugate-gradient iterations used.
 */
uintptr_t gsr_solution_iterations(const GsrSolution *sol);

/**
 * Final relative residual norm of the solve.
 */
double gsr_solution_residual(const GsrSolution *sol);

/**
 * Nonzero if the solver reached its tolerance within the iteration cap.
 */
uint8_t gsr_solution_converged(const GsrSolution *sol);

/**
 * Copies the depth map into `out` (`height * width` doubles, row-major).
 *
 * # Safety
 * `out` must be valid for `height * width` doubles.
 */
GsrStatus gsr_solution_copy_depth(const GsrSolution *sol, double *out);

/**
 * Copies the validity mask into `out` (`height * width` bytes, nonzero =
 * valid).
 *
 * # Safety
 * `out` must be valid for `height * width` bytes.
 */
GsrStatus gsr_solution_copy_mask(const GsrSolution *sol, uint8_t *out);

/**
 * Releases a solution handle. Null is a no-op.
 */
void gsr_solution_free(GsrSolution *sol);

/**
 * Runs the finite-difference gradient check on a random instance and
 * writes the worst relative error to `max_rel_err` (may be null).
 * Returns `GSR_STATUS_NUMERICAL` if the check exceeds `bound`.
 *
 * # Safety
 * `max_rel_err` must be null or valid for one double.
 */
GsrStatus gsr_gradcheck(uint64_t seed,
                        uintptr_t height,
                        uintptr_t width,
                        uintptr_t scale,
                        double lambda,
                        double bound,
                        double *max_rel_err);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* GRAPHSR_H */
