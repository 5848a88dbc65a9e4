/* C interface to the itro-lab rationale-training laboratory. */

#ifndef ITRO_LAB_H
#define ITRO_LAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every entry point.
 */
typedef enum ItroStatus {
  /**
   * Success.
   */
  ItroStatus_Ok = 0,
  /**
   * A pointer argument was null or a value argument was out of range.
   */
  ItroStatus_InvalidArgument = 1,
  /**
   * String argument was not valid UTF-8.
   */
  ItroStatus_InvalidUtf8 = 2,
  /**
   * File could not be read or written.
   */
  ItroStatus_Io = 3,
  /**
   * Configuration or checkpoint text failed to parse or validate.
   */
  ItroStatus_Parse = 4,
  /**
   * The operation itself failed; see itro_last_error_message.
   */
  ItroStatus_Runtime = 5,
} ItroStatus;

/**
 * Opaque handle to a loaded policy checkpoint and its task description.
 */
typedef struct ItroCheckpoint ItroCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null if the
 * last call succeeded. The pointer is valid until the next failing call on
 * the same thread.
 */
const char *itro_last_error_message(void);

/**
 * Load a text checkpoint from `path` into a new handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum ItroStatus itro_checkpoint_load(const char *path, struct ItroCheckpoint **out);

/**
 * Write the handle's policy back out as a text checkpoint.
 *
 * # Safety
 * `handle` must come from `itro_checkpoint_load` and not yet be freed;
 * `path` must be a valid NUL-terminated string.
 */
enum ItroStatus itro_checkpoint_save(const struct ItroCheckpoint *handle, const char *path);

/**
 * Release a checkpoint handle. Null is ignored.
 *
 * # Safety
 * `handle` must come from `itro_checkpoint_load` and not be used afterwards.
 */
void itro_checkpoint_free(struct ItroCheckpoint *handle);

/**
 * Number of policy parameters behind the handle.
 *
 * # Safety
 * `handle` must be a live checkpoint handle; `out` must be a valid pointer.
 */
enum ItroStatus itro_checkpoint_n_params(const struct ItroCheckpoint *handle, size_t *out);

/**
 * Log-probability the policy assigns to rationale `z` given query `x`,
 * conditioning on the answer as well when `conditioned` is nonzero.
 *
 * # Safety
 * `handle` must be live; `x`/`z` must point to `x_len`/`z_len` readable
 * elements; `out` must be a valid pointer.
 */
enum ItroStatus itro_rationale_logprob(const struct ItroCheckpoint *handle,
                                       const size_t *x,
                                       size_t x_len,
                                       const size_t *z,
                                       size_t z_len,
                                       double *out);

/**
 * Greedy-decoding accuracy of the checkpoint over its full query family.
 *
 * # Safety
 * `handle` must be live and `out` a valid pointer.
 */
enum ItroStatus itro_greedy_accuracy(const struct ItroCheckpoint *handle, double *out);

/**
 * Parse `config_text`, train to completion under `output_dir`, and report
 * the final greedy accuracy.
 *
 * # Safety
 * Both strings must be valid NUL-terminated strings; `out_final_accuracy`
 * may be null if the caller does not need the value.
 */
enum ItroStatus itro_train(const char *config_text,
                           const char *output_dir,
                           double *out_final_accuracy);

/**
 * Run the exact-identity battery for `config_text`. Sets `*out_all_pass` to
 * 1 when every identity holds within tolerance, 0 otherwise.
 *
 * # Safety
 * `config_text` must be a valid NUL-terminated string and `out_all_pass` a
 * valid pointer.
 */
enum ItroStatus itro_oracle_check(const char *config_text, int32_t *out_all_pass);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ITRO_LAB_H */
