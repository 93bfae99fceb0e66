#ifndef BRIDGE_ATTN_H
#define BRIDGE_ATTN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum BaStatus {
  BA_STATUS_OK = 0,
  BA_STATUS_NULL_POINTER = 1,
  BA_STATUS_INVALID_ARGUMENT = 2,
  BA_STATUS_SHAPE = 3,
  BA_STATUS_NON_FINITE = 4,
  BA_STATUS_DEGENERATE = 5,
  BA_STATUS_BUFFER_TOO_SMALL = 6,
  BA_STATUS_INTERNAL = 7,
} BaStatus;

/**
 * An attention module with its own seeded parameters, run in eval mode.
 */
typedef struct BaAttention BaAttention;

/**
 * A finished audit of one architecture.
 */
typedef struct BaAudit BaAudit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *ba_last_error_message(void);

void ba_clear_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ba_version(void);

/**
 * Audits `arch` ("resnet18" .. "resnet101") with `attention` ("none",
 * "se", "bav1", "bav2") at reduction `r` and average pooling.
 *
 * # Safety
 * `arch` and `attention` must be NUL-terminated strings; `out` must be a
 * valid pointer.
 */
enum BaStatus ba_audit_new(const char *arch,
                           const char *attention,
                           uint32_t r,
                           struct BaAudit **out);

/**
 * # Safety
 * `audit` must come from [`ba_audit_new`] or be null.
 */
void ba_audit_free(struct BaAudit *audit);

/**
 * Learnable parameters of the whole network; 0 for a null handle.
 *
 * # Safety
 * `audit` must come from [`ba_audit_new`] or be null.
 */
uint64_t ba_audit_params(const struct BaAudit *audit);

/**
 * Multiply-accumulates of one forward pass; 0 for a null handle.
 *
 * # Safety
 * `audit` must come from [`ba_audit_new`] or be null.
 */
uint64_t ba_audit_flops(const struct BaAudit *audit);

/**
 * Attention extras under the `paper` counting mode (fusion scalars plus
 * one parameter per BN channel).
 *
 * # Safety
 * `audit` must come from [`ba_audit_new`] or be null.
 */
uint64_t ba_audit_attention_params_paper(const struct BaAudit *audit);

/**
 * True when neither count misses its reference cell.
 *
 * # Safety
 * `audit` must come from [`ba_audit_new`] or be null.
 */
bool ba_audit_passed(const struct BaAudit *audit);

/**
 * Writes the JSON report plus a NUL into `buf`. `needed` receives the
 * size including the NUL, so a call with `cap == 0` sizes the buffer.
 *
 * # Safety
 * `audit` must come from [`ba_audit_new`]; `buf` must hold `cap` bytes
 * (or be null when `cap == 0`); `needed` may be null.
 */
enum BaStatus ba_audit_json(const struct BaAudit *audit, char *buf, size_t cap, size_t *needed);

/**
 * Builds `variant` ("se", "bav1", "bav2") for `n_branches` taps of the
 * given widths; the last tap has `out_channels` channels and is the one
 * SE reads. `pooling` is "avg", "avg_max", "avg_std" or "dct:k".
 *
 * # Safety
 * Strings must be NUL-terminated; `widths` must hold `n_branches` values;
 * `out` must be a valid pointer.
 */
enum BaStatus ba_attention_new(const char *variant,
                               const char *pooling,
                               const size_t *widths,
                               size_t n_branches,
                               size_t out_channels,
                               uint32_t r,
                               uint64_t seed,
                               struct BaAttention **out);

/**
 * # Safety
 * `attn` must come from [`ba_attention_new`] or be null.
 */
void ba_attention_free(struct BaAttention *attn);

/**
 * Learnable scalars of the module.
 *
 * # Safety
 * `attn` must come from [`ba_attention_new`] or be null.
 */
size_t ba_attention_param_count(const struct BaAttention *attn);

/**
 * Computes `ω` for a batch of `n` samples. Branch `i` is a contiguous
 * `[n, widths[i], heights[i], widths_px[i]]` array at `inputs[i]`; `omega`
 * receives `n × out_channels` values, row-major.
 *
 * # Safety
 * `inputs`, `heights` and `widths_px` must hold one entry per branch, each
 * input must hold its full array, and `omega` must hold `omega_len` values.
 */
enum BaStatus ba_attention_forward(struct BaAttention *attn,
                                   const double *const *inputs,
                                   size_t n,
                                   const size_t *heights,
                                   const size_t *widths_px,
                                   double *omega,
                                   size_t omega_len);

/**
 * Linear CKA between feature batches `x: [rows, x_cols]` and
 * `y: [rows, y_cols]`, both row-major.
 *
 * # Safety
 * `x` and `y` must hold `rows × x_cols` and `rows × y_cols` values;
 * `out` must be a valid pointer.
 */
enum BaStatus ba_cka(const double *x,
                     const double *y,
                     size_t rows,
                     size_t x_cols,
                     size_t y_cols,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRIDGE_ATTN_H */
