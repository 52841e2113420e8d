#ifndef GKV_H
#define GKV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum GkvStatus {
  GKV_STATUS_OK = 0,
  GKV_STATUS_NULL_POINTER = 1,
  GKV_STATUS_INVALID_ARGUMENT = 2,
  GKV_STATUS_IO = 3,
  GKV_STATUS_FORMAT = 4,
  GKV_STATUS_COMPUTE = 5,
  GKV_STATUS_PANIC = 6,
} GkvStatus;

// Sparse attention masks derived from a run.
typedef struct GkvMasks GkvMasks;

// The eviction log and metrics of one replay.
typedef struct GkvRun GkvRun;

// A decoded trace.
typedef struct GkvTrace GkvTrace;

// Eviction settings. `policy` is a policy name such as `"gkv"`, `"snapkv"`
// or `"global-mean+redundancy"`; null means `"gkv"`. A negative
// `recent_exempt` means the window size.
typedef struct GkvConfig {
  size_t budget;
  size_t window;
  size_t stride;
  double alpha;
  double lambda;
  const char *policy;
  bool prefer_old_on_ties;
  size_t sink_tokens;
  bool compress_prompt;
  size_t pool_kernel;
  bool global_pool;
  bool normalize_local;
  double redundancy_threshold;
  int64_t recent_exempt;
  double epsilon;
} GkvConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *gkv_last_error_message(void);

// Library version, static storage.
const char *gkv_version(void);

// Fills `out` with the default settings (policy left null, meaning G-KV).
//
// # Safety
// `out` must be null or point to writable memory for one `GkvConfig`.
enum GkvStatus gkv_config_default(struct GkvConfig *out);

// Reads a GKVT file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum GkvStatus gkv_trace_open(const char *path, struct GkvTrace **out);

// Builds a trace from step-major buffers: for each step, for each layer,
// `n_q_heads × head_dim` query values and `n_kv_heads × head_dim` key values.
//
// # Safety
// `q` and `k` must point to the number of floats implied by the dimensions.
enum GkvStatus gkv_trace_from_buffers(size_t n_layers,
                                      size_t n_q_heads,
                                      size_t n_kv_heads,
                                      size_t head_dim,
                                      size_t n_prompt,
                                      size_t n_steps,
                                      const float *q,
                                      const float *k,
                                      struct GkvTrace **out);

// Number of steps, or 0 for null.
//
// # Safety
// `trace` must be null or a live handle.
size_t gkv_trace_n_steps(const struct GkvTrace *trace);

// # Safety
// `trace` must be null or a handle not yet freed.
void gkv_trace_free(struct GkvTrace *trace);

// Replays `trace` under `config`.
//
// # Safety
// Pointers must be live handles / readable structs; `out` must be writable.
enum GkvStatus gkv_simulate(const struct GkvTrace *trace,
                            const struct GkvConfig *config,
                            struct GkvRun **out);

// Final cache length over sequence length.
//
// # Safety
// `run` must be a live handle and `out` writable.
enum GkvStatus gkv_run_retention_ratio(const struct GkvRun *run, double *out);

// Number of per-head eviction events, or 0 for null.
//
// # Safety
// `run` must be null or a live handle.
size_t gkv_run_n_events(const struct GkvRun *run);

// Number of compressions, or 0 for null.
//
// # Safety
// `run` must be null or a live handle.
size_t gkv_run_n_compressions(const struct GkvRun *run);

// Copies the positions `(layer, head)` holds at the end of the run into
// `buf` (ascending). `len` receives the full count even when `cap` is too
// small, in which case nothing is copied and `InvalidArgument` is returned.
//
// # Safety
// `buf` must have room for `cap` values; `len` must be writable.
enum GkvStatus gkv_run_retained(const struct GkvRun *run,
                                size_t layer,
                                size_t head,
                                size_t *buf,
                                size_t cap,
                                size_t *len);

// Writes the log as JSON lines (`binary == 0`) or in the compact binary form.
//
// # Safety
// `run` must be a live handle and `path` a NUL-terminated string.
enum GkvStatus gkv_run_write_log(const struct GkvRun *run, const char *path, int binary);

// # Safety
// `run` must be null or a handle not yet freed.
void gkv_run_free(struct GkvRun *run);

// Masks implied by the run's log over `seq_len` positions (0 means the run's length).
//
// # Safety
// `run` must be a live handle and `out` writable.
enum GkvStatus gkv_masks_from_run(const struct GkvRun *run, size_t seq_len, struct GkvMasks **out);

// 1 if query `j` sees key `i` in `(layer, head)`, 0 if not, -1 on bad arguments.
//
// # Safety
// `masks` must be null or a live handle.
int gkv_masks_visible(const struct GkvMasks *masks, size_t layer, size_t head, size_t i, size_t j);

// # Safety
// `masks` must be null or a handle not yet freed.
void gkv_masks_free(struct GkvMasks *masks);

// Bytes of keys and values for a full cache.
//
// # Safety
// `out` must be writable.
enum GkvStatus gkv_kv_memory_bytes(size_t layers,
                                   size_t head_dim,
                                   size_t n_kv_heads,
                                   size_t seq_len,
                                   size_t bytes_per_el,
                                   size_t batch,
                                   uint64_t *out);

// Bytes of one-byte dense masks.
//
// # Safety
// `out` must be writable.
enum GkvStatus gkv_mask_memory_bytes(size_t batch,
                                     size_t layers,
                                     size_t n_kv_heads,
                                     size_t seq_len,
                                     uint64_t *out);

// `(budget + stride) / seq_len`.
//
// # Safety
// `out` must be writable.
enum GkvStatus gkv_compressed_fraction(size_t budget, size_t stride, size_t seq_len, double *out);

// Carried scores relative to the retained keys and values.
//
// # Safety
// `out` must be writable.
enum GkvStatus gkv_score_cache_fraction(size_t budget, size_t window, size_t head_dim, double *out);

// Group-standardized advantages. `truncated` may be null; otherwise it
// holds `n` flags (nonzero means truncated).
//
// # Safety
// `rewards` and `out` must hold `n` values; `truncated` null or `n` bytes.
enum GkvStatus gkv_grpo_advantages(const double *rewards,
                                   const uint8_t *truncated,
                                   size_t n,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GKV_H */
