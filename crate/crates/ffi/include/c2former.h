#ifndef C2FORMER_H
#define C2FORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. File-format failures keep distinct values per cause.
 */
typedef enum C2fStatus {
  C2F_STATUS_OK = 0,
  C2F_STATUS_NULL_POINTER = 1,
  C2F_STATUS_INVALID_ARGUMENT = 2,
  C2F_STATUS_SHAPE_MISMATCH = 3,
  C2F_STATUS_INVALID_CONFIG = 4,
  C2F_STATUS_IO = 5,
  C2F_STATUS_INTERNAL = 6,
  C2F_STATUS_BAD_MAGIC = 11,
  C2F_STATUS_BAD_VERSION = 12,
  C2F_STATUS_BAD_RANK = 13,
  C2F_STATUS_TRUNCATED = 14,
  C2F_STATUS_TRAILING_BYTES = 15,
  C2F_STATUS_BAD_RESERVED = 16,
  C2F_STATUS_ZERO_EXTENT = 17,
} C2fStatus;

/**
 * Block configuration together with its parameters.
 */
typedef struct C2fBlock C2fBlock;

/**
 * A dense row-major tensor of `f64`.
 */
typedef struct C2fTensor C2fTensor;

/**
 * FLOP counts per component, as in the library's FLOPs model.
 */
typedef struct C2fFlops {
  uint64_t descriptors;
  uint64_t modnorm;
  uint64_t attention_matmuls;
  uint64_t softmax;
  uint64_t value_matmuls;
  uint64_t output_projection;
  uint64_t afs;
  uint64_t total;
  uint64_t parameter_count;
} C2fFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static description of a status code.
 */
const char *c2f_status_message(enum C2fStatus status);

/**
 * Message of the last failure on this thread, or null if none. Valid until
 * the next failing call on the same thread.
 */
const char *c2f_last_error(void);

/**
 * Creates a tensor of rank `ndim` (1..=4). `data` may be null for zeros,
 * otherwise it must hold the product of `dims` values.
 *
 * # Safety
 * `dims` must point to `ndim` values; `data`, when non-null, to the full
 * element count; `out` to writable storage.
 */
enum C2fStatus c2f_tensor_new(const size_t *dims,
                              size_t ndim,
                              const double *data,
                              struct C2fTensor **out);

/**
 * # Safety
 * `t` must be null or a tensor from this library not yet freed.
 */
void c2f_tensor_free(struct C2fTensor *t);

/**
 * Rank of `t`, or 0 for null.
 *
 * # Safety
 * `t` must be null or a live tensor.
 */
size_t c2f_tensor_ndim(const struct C2fTensor *t);

/**
 * Element count of `t`, or 0 for null.
 *
 * # Safety
 * `t` must be null or a live tensor.
 */
size_t c2f_tensor_len(const struct C2fTensor *t);

/**
 * Copies the extents into `out_dims`, which holds `cap` entries.
 *
 * # Safety
 * `t` must be a live tensor and `out_dims` writable for `cap` values.
 */
enum C2fStatus c2f_tensor_dims(const struct C2fTensor *t, size_t *out_dims, size_t cap);

/**
 * Read-only view of the row-major values, or null. Valid while `t` lives.
 *
 * # Safety
 * `t` must be null or a live tensor.
 */
const double *c2f_tensor_data(const struct C2fTensor *t);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum C2fStatus c2f_tensor_read(const char *path, struct C2fTensor **out);

/**
 * # Safety
 * `t` must be a live tensor and `path` a nul-terminated string.
 */
enum C2fStatus c2f_tensor_write(const struct C2fTensor *t, const char *path);

/**
 * Creates a block with freshly initialized parameters for `seed`.
 *
 * # Safety
 * `out` must be writable.
 */
enum C2fStatus c2f_block_new(size_t channels,
                             size_t height,
                             size_t width,
                             size_t stride,
                             uint64_t seed,
                             bool bias_enabled,
                             struct C2fBlock **out);

/**
 * # Safety
 * `b` must be null or a block from this library not yet freed.
 */
void c2f_block_free(struct C2fBlock *b);

/**
 * Number of learnable scalars, or 0 for null.
 *
 * # Safety
 * `b` must be null or a live block.
 */
size_t c2f_block_param_count(const struct C2fBlock *b);

/**
 * Replaces the parameters with those stored at `path`.
 *
 * # Safety
 * `b` must be a live block and `path` a nul-terminated string.
 */
enum C2fStatus c2f_block_load_params(struct C2fBlock *b, const char *path);

/**
 * # Safety
 * `b` must be a live block and `path` a nul-terminated string.
 */
enum C2fStatus c2f_block_save_params(const struct C2fBlock *b, const char *path);

/**
 * Runs the block on `(N, C, H, W)` inputs; writes two new tensors.
 *
 * # Safety
 * All pointers must be live handles or writable output slots.
 */
enum C2fStatus c2f_block_forward(const struct C2fBlock *b,
                                 const struct C2fTensor *rgb,
                                 const struct C2fTensor *ir,
                                 struct C2fTensor **out_rgb,
                                 struct C2fTensor **out_ir);

/**
 * # Safety
 * `out` must be writable.
 */
enum C2fStatus c2f_count_flops(size_t channels,
                               size_t height,
                               size_t width,
                               size_t stride,
                               bool bias_enabled,
                               struct C2fFlops *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* C2FORMER_H */
