#ifndef GASNET_H
#define GASNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GasnetStatus {
  GASNET_STATUS_OK = 0,
  GASNET_STATUS_NULL_ARGUMENT = 1,
  // Unreadable, malformed or inconsistent input.
  GASNET_STATUS_INVALID_INPUT = 2,
  // The estimator stopped before meeting its tolerance; the handle still
  // holds the best iterate.
  GASNET_STATUS_NOT_CONVERGED = 3,
  // A solver failed without producing a usable result.
  GASNET_STATUS_SOLVER_FAILURE = 4,
  // The caller's buffer is too short.
  GASNET_STATUS_BUFFER_TOO_SMALL = 5,
  // A bug inside the library.
  GASNET_STATUS_INTERNAL = 6,
} GasnetStatus;

// Result of a friction estimate.
typedef struct GasnetEstimate GasnetEstimate;

// A network with its scaling and refinement.
typedef struct GasnetModel GasnetModel;

// Junction densities from a periodic simulation.
typedef struct GasnetSimulation GasnetSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` as a
// NUL-terminated string and returns the full message length in bytes
// (excluding the terminator). Passing a null `buf` only queries the length.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t gasnet_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *gasnet_version(void);

// Loads a network JSON file and refines it to segments no longer than
// `segment_length_km`.
//
// # Safety
// `network_path` must be a NUL-terminated string; `out` must be writable.
enum GasnetStatus gasnet_model_load(const char *network_path,
                                    double segment_length_km,
                                    struct GasnetModel **out);

// # Safety
// `model` must be null or a handle from [`gasnet_model_load`] not yet freed.
void gasnet_model_free(struct GasnetModel *model);

// Number of pipes, which is the length of a friction vector.
//
// # Safety
// `model` must be a live handle.
size_t gasnet_model_num_pipes(const struct GasnetModel *model);

// Number of segments after refinement.
//
// # Safety
// `model` must be a live handle.
size_t gasnet_model_num_segments(const struct GasnetModel *model);

// Simulates the periodic transient driven by a boundary profile CSV.
// `steps == 0` keeps the file's time grid.
//
// # Safety
// `model` must be a live handle, `profiles_path` a NUL-terminated string
// and `out` writable.
enum GasnetStatus gasnet_simulate(const struct GasnetModel *model,
                                  const char *profiles_path,
                                  size_t steps,
                                  struct GasnetSimulation **out);

// # Safety
// `sim` must be null or a handle from [`gasnet_simulate`] not yet freed.
void gasnet_simulation_free(struct GasnetSimulation *sim);

// Number of time points per period.
//
// # Safety
// `sim` must be a live handle.
size_t gasnet_simulation_steps(const struct GasnetSimulation *sim);

// Relative imbalance between supply, withdrawal and linepack change over
// one period.
//
// # Safety
// `sim` must be a live handle.
double gasnet_simulation_conservation_error(const struct GasnetSimulation *sim);

// Copies the density series (kg/m³) of a non-slack junction into `buf`,
// which must hold [`gasnet_simulation_steps`] values.
//
// # Safety
// `sim` must be a live handle, `junction` a NUL-terminated string and
// `buf` valid for `len` values.
enum GasnetStatus gasnet_simulation_density(const struct GasnetSimulation *sim,
                                            const char *junction,
                                            double *buf,
                                            size_t len);

// Estimates state, withdrawals and pipe friction from a measurement CSV.
// `steps == 0` keeps the file's time grid. Friction starts at
// `friction_init` times the network's values.
//
// Returns [`GasnetStatus::NotConverged`] with a valid handle when the
// iteration cap is reached first.
//
// # Safety
// `model` must be a live handle, `measurements_path` a NUL-terminated
// string and `out` writable.
enum GasnetStatus gasnet_estimate(const struct GasnetModel *model,
                                  const char *measurements_path,
                                  size_t steps,
                                  double friction_init,
                                  size_t max_iterations,
                                  struct GasnetEstimate **out);

// # Safety
// `est` must be null or a handle from [`gasnet_estimate`] not yet freed.
void gasnet_estimate_free(struct GasnetEstimate *est);

// Interior-point iterations used.
//
// # Safety
// `est` must be a live handle.
size_t gasnet_estimate_iterations(const struct GasnetEstimate *est);

// Copies the estimated friction factors, in network pipe order, into
// `buf`, which must hold [`gasnet_model_num_pipes`] values.
//
// # Safety
// `est` must be a live handle and `buf` valid for `len` values.
enum GasnetStatus gasnet_estimate_friction(const struct GasnetEstimate *est,
                                           double *buf,
                                           size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GASNET_H */
