#ifndef SECCLUSTER_H
#define SECCLUSTER_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SclStatus {
  SCL_STATUS_OK = 0,
  SCL_STATUS_NULL_POINTER = 1,
  SCL_STATUS_INVALID_UTF8 = 2,
  SCL_STATUS_INVALID_PARAMETER = 3,
  SCL_STATUS_INVALID_SCENARIO = 4,
  SCL_STATUS_ORPHAN_NODES = 5,
  SCL_STATUS_DEAD_RING = 6,
  SCL_STATUS_INVALID_READING = 7,
  SCL_STATUS_PROTOCOL_VIOLATION = 8,
  SCL_STATUS_AMBIGUITY = 9,
  SCL_STATUS_NON_TERMINATION = 10,
  SCL_STATUS_CHAIN_EXHAUSTED = 11,
  SCL_STATUS_CONFIG = 12,
  SCL_STATUS_IO = 13,
  /**
   * A checker reported that a property does not hold.
   */
  SCL_STATUS_PROPERTY_FAILED = 14,
  SCL_STATUS_PANIC = 99,
} SclStatus;

/**
 * Validated scenario configuration.
 */
typedef struct SclScenario SclScenario;

/**
 * A simulation advanced one epoch at a time.
 */
typedef struct SclSimulation SclSimulation;

typedef struct SclEpochSummary {
  uint32_t epoch;
  /**
   * Non-zero when fewer than three nodes were alive and nothing ran.
   */
  uint8_t halted;
  uint32_t rings;
  uint32_t aggregators;
  uint64_t alive_end;
  uint64_t deaths;
  uint64_t messages;
  double energy_consumed_j;
} SclEpochSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message explaining why the most recent call on this thread failed, or
 * null if it succeeded. Valid until the next call on this thread.
 */
const char *scl_last_error(void);

/**
 * Library version as a static string.
 */
const char *scl_version(void);

/**
 * Parses and validates a TOML scenario.
 *
 * # Safety
 * `toml` must be a nul-terminated string and `out` a valid pointer.
 */
enum SclStatus scl_scenario_from_toml(const char *toml, struct SclScenario **out);

/**
 * Default scenario with the given node count and seed.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SclStatus scl_scenario_default(uint32_t n, uint64_t seed, struct SclScenario **out);

/**
 * # Safety
 * `scenario` must come from this library or be null.
 */
enum SclStatus scl_scenario_set_seed(struct SclScenario *scenario, uint64_t seed);

/**
 * # Safety
 * `scenario` must come from this library or be null.
 */
void scl_scenario_free(struct SclScenario *scenario);

/**
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
enum SclStatus scl_simulation_new(const struct SclScenario *scenario, struct SclSimulation **out);

/**
 * Runs one epoch; `summary` may be null.
 *
 * # Safety
 * `sim` must be a live handle; `summary` null or valid.
 */
enum SclStatus scl_simulation_run_epoch(struct SclSimulation *sim, struct SclEpochSummary *summary);

/**
 * Number of live nodes, or 0 for a null handle.
 *
 * # Safety
 * `sim` must be a live handle or null.
 */
uint64_t scl_simulation_alive_count(const struct SclSimulation *sim);

/**
 * Writes the transcript so far as JSON lines to `path`.
 *
 * # Safety
 * `sim` must be a live handle and `path` a nul-terminated string.
 */
enum SclStatus scl_simulation_write_transcript(const struct SclSimulation *sim, const char *path);

/**
 * # Safety
 * `sim` must come from this library or be null.
 */
void scl_simulation_free(struct SclSimulation *sim);

/**
 * Runs the whole scenario and returns its metrics as JSON.
 *
 * # Safety
 * `scenario` must be a live handle and `out_json` a valid pointer.
 */
enum SclStatus scl_run_metrics_json(const struct SclScenario *scenario, char **out_json);

/**
 * Runs all six property checkers. Bit `i` of `failed_mask` is set when
 * property `i` fails, in the order termination, completeness,
 * consistency, non-manipulability, unpredictability, unidentifiability.
 * Returns `PropertyFailed` when any bit is set.
 *
 * # Safety
 * `scenario` must be a live handle; `failed_mask` null or valid.
 */
enum SclStatus scl_verify(const struct SclScenario *scenario,
                          uint32_t trials,
                          uint32_t *failed_mask);

/**
 * Recovers `(c, M)` from an unmasked residue `c·M` for a ring of
 * `ring_size` nodes with per-node readings in `[lo, hi]`.
 *
 * # Safety
 * `c` and `m` must be valid pointers.
 */
enum SclStatus scl_recover(uint64_t residue,
                           uint64_t lo,
                           uint64_t hi,
                           uint32_t ring_size,
                           uint32_t *c,
                           uint64_t *m);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void scl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SECCLUSTER_H */
