/* C interface to the order-preserving share store.
 *
 * Handles are not thread-safe: confine each OdesClient to one thread or
 * guard it externally. Error messages are per-thread; fetch them with
 * odes_last_error right after a failing call. */

#ifndef ODES_H
#define ODES_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Comparison verdicts for `odes_compare`.
 */
typedef enum OdesOrdering {
  ODES_ORDERING_LESS = -1,
  ODES_ORDERING_EQUAL = 0,
  ODES_ORDERING_GREATER = 1,
} OdesOrdering;

/**
 * Predicate selector for `odes_query`.
 */
typedef enum OdesPredicate {
  ODES_PREDICATE_ALL = 0,
  /**
   * ranks in `[a, b]`
   */
  ODES_PREDICATE_RANGE_BY_RANK = 1,
  /**
   * the `a` largest values
   */
  ODES_PREDICATE_TOP_K = 2,
  /**
   * the `a` smallest values
   */
  ODES_PREDICATE_BOTTOM_K = 3,
} OdesPredicate;

/**
 * Status codes returned by every fallible call.
 */
typedef enum OdesStatus {
  ODES_STATUS_OK = 0,
  ODES_STATUS_NULL_POINTER = 1,
  ODES_STATUS_INVALID_ARGUMENT = 2,
  ODES_STATUS_BOUND_EXCEEDED = 3,
  ODES_STATUS_UNKNOWN_RID = 4,
  ODES_STATUS_DUPLICATE_RID = 5,
  ODES_STATUS_RANK_OUT_OF_BOUNDS = 6,
  ODES_STATUS_PROTOCOL_ERROR = 7,
  ODES_STATUS_INVALID_UTF8 = 8,
  ODES_STATUS_BUFFER_TOO_SMALL = 9,
} OdesStatus;

/**
 * Opaque handle over one embedded cluster plus its client session.
 */
typedef struct OdesClient OdesClient;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message for this thread into `buf`
 * (NUL-terminated, truncated to `cap`); returns the full length.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be NULL (length query).
 */
uintptr_t odes_last_error(char *buf, uintptr_t cap);

/**
 * Opens an embedded cluster of `servers` share servers.
 *
 * `mask_bits` is the statistical masking exponent, `bound` the largest
 * plaintext magnitude, `seed` makes runs reproducible (pass 0 to draw
 * from OS entropy). Returns NULL on invalid parameters.
 */
struct OdesClient *odes_open(uint16_t servers, uint32_t mask_bits, int64_t bound, uint64_t seed);

/**
 * Releases a handle returned by `odes_open`.
 *
 * # Safety
 * `client` must be a pointer from `odes_open` not yet closed, or NULL.
 */
void odes_close(struct OdesClient *client);

/**
 * Inserts `(key, value)`; writes the assigned record id to `out_rid`
 * and its rank to `out_rank` (either may be NULL).
 *
 * # Safety
 * `client` must be a live handle, `key` a NUL-terminated string, and
 * the out pointers writable or NULL.
 */
enum OdesStatus odes_insert(struct OdesClient *client,
                            const char *key,
                            int64_t value,
                            uint64_t *out_rid,
                            uint64_t *out_rank);

/**
 * Deletes the record with id `rid` on every server.
 *
 * # Safety
 * `client` must be a live handle.
 */
enum OdesStatus odes_delete(struct OdesClient *client, uint64_t rid);

/**
 * Replaces the record's value, keeping its key; returns the fresh rid
 * through `out_rid`.
 *
 * # Safety
 * `client` must be a live handle; `out_rid` writable or NULL.
 */
enum OdesStatus odes_modify(struct OdesClient *client,
                            uint64_t rid,
                            int64_t new_value,
                            uint64_t *out_rid);

/**
 * Compares `value` against the stored record at `target_rank` in one
 * ephemeral round; no server state changes.
 *
 * # Safety
 * `client` must be a live handle; `out_ordering` writable.
 */
enum OdesStatus odes_compare(struct OdesClient *client,
                             int64_t value,
                             uint64_t target_rank,
                             enum OdesOrdering *out_ordering);

/**
 * Runs a rank query and caches the reconstructed rows on the handle;
 * the row count lands in `out_count`, rows are read via
 * `odes_query_row`.
 *
 * # Safety
 * `client` must be a live handle; `out_count` writable.
 */
enum OdesStatus odes_query(struct OdesClient *client,
                           enum OdesPredicate predicate,
                           uint64_t a,
                           uint64_t b,
                           uint64_t *out_count);

/**
 * Reads row `i` of the last `odes_query` result. The key is copied
 * NUL-terminated into `key_buf` (truncated to `key_cap`).
 *
 * # Safety
 * `client` must be a live handle; out pointers writable or NULL;
 * `key_buf` must hold `key_cap` bytes when non-NULL.
 */
enum OdesStatus odes_query_row(struct OdesClient *client,
                               uint64_t i,
                               uint64_t *out_rank,
                               uint64_t *out_rid,
                               int64_t *out_value,
                               char *key_buf,
                               uintptr_t key_cap);

/**
 * Number of records currently stored (from server 0's replica).
 *
 * # Safety
 * `client` must be a live handle; `out_count` writable.
 */
enum OdesStatus odes_record_count(struct OdesClient *client, uint64_t *out_count);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ODES_H */
