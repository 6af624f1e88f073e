#ifndef SWITCHGAME_H
#define SWITCHGAME_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgRoute {
  SG_ROUTE_PDE_MINMAX = 0,
  SG_ROUTE_PDE_MAXMIN = 1,
  SG_ROUTE_LADDER_DEC = 2,
  SG_ROUTE_LADDER_INC = 3,
  SG_ROUTE_LATTICE = 4,
} SgRoute;

// Result of every fallible call.
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_CONFIG = 3,
  SG_STATUS_IO = 4,
  SG_STATUS_GRID_MISMATCH = 5,
  SG_STATUS_INVALID_PROBLEM = 6,
  // A solver gave up: CFL, conditioning, non-convergence and the like.
  SG_STATUS_NUMERICAL = 7,
  // A game play was not admissible or the contact sets collided.
  SG_STATUS_GAME = 8,
  SG_STATUS_PANIC = 9,
} SgStatus;

// A value surface on a time-space grid.
typedef struct SgField SgField;

// A resolved run configuration and the problem it describes.
typedef struct SgProblem SgProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *sg_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *sg_last_error(void);

// Loads a TOML run configuration from `path`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum SgStatus sg_problem_load(const char *path, struct SgProblem **out);

// Parses a TOML run configuration held in memory.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum SgStatus sg_problem_parse(const char *text, struct SgProblem **out);

// # Safety
// `problem` must come from this library and not be used afterwards. Null is
// ignored.
void sg_problem_free(struct SgProblem *problem);

// Number of modes.
//
// # Safety
// `problem` must be a live handle; `out` must be writable.
enum SgStatus sg_problem_modes(const struct SgProblem *problem, size_t *out);

// Runs the exact assumption checks on the configured grid. Returns
// `SG_STATUS_INVALID_PROBLEM` with the report as the error message if any
// fails.
//
// # Safety
// `problem` must be a live handle.
enum SgStatus sg_problem_preflight(const struct SgProblem *problem);

// Solves by `route` with the configured grid, lattice and ladder settings.
// Ladder routes return the last rung.
//
// # Safety
// `problem` must be a live handle; `out` must be writable.
enum SgStatus sg_solve(const struct SgProblem *problem, enum SgRoute route, struct SgField **out);

// Initial values `Y_0` of the penalized backward equations, one per mode,
// with the configured Monte Carlo and penalty settings. `len` must equal the
// number of modes.
//
// # Safety
// `problem` must be a live handle; `y0` must point to `len` writable doubles.
enum SgStatus sg_bsde_y0(const struct SgProblem *problem, double *y0, size_t len);

// Reads a field CSV and its metadata sidecar.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum SgStatus sg_field_read(const char *path, struct SgField **out);

// Writes the field as CSV plus metadata sidecar.
//
// # Safety
// `field` must be a live handle; `path` a NUL-terminated string.
enum SgStatus sg_field_write(const struct SgField *field, const char *path);

// # Safety
// `field` must come from this library and not be used afterwards. Null is
// ignored.
void sg_field_free(struct SgField *field);

// Grid sizes. Any output pointer may be null.
//
// # Safety
// `field` must be a live handle.
enum SgStatus sg_field_shape(const struct SgField *field,
                             size_t *n_times,
                             size_t *n_x,
                             size_t *modes);

// Grid value of 0-based `mode` at time index `j` and space index `k`.
//
// # Safety
// `field` must be a live handle; `out` must be writable.
enum SgStatus sg_field_value(const struct SgField *field,
                             size_t mode,
                             size_t j,
                             size_t k,
                             double *out);

// Bilinear interpolation of 0-based `mode` at `(t, x)`, clamped to the grid.
//
// # Safety
// `field` must be a live handle; `out` must be writable.
enum SgStatus sg_field_interp(const struct SgField *field,
                              size_t mode,
                              double t,
                              double x,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SWITCHGAME_H */
